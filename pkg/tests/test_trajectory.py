import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from onestep_tse.errors import ValidationError
from onestep_tse.trajectory import (Interval, PathKind, endpoints_for, intermediate_state, intermediate_time,
                                    intermediate_times, state_at, true_velocity)

MT, BT = PathKind.MIXTURE_TO_TARGET, PathKind.BACKGROUND_TO_TARGET


def _pair(seed=0, shape=(8, 5)):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape), rng.standard_normal(shape)


def test_endpoints_exact():
    Y, S = _pair()
    np.testing.assert_array_equal(state_at(MT, (Y, S), 0.0), Y)
    np.testing.assert_array_equal(state_at(MT, (Y, S), 1.0), S)


def test_velocity_is_time_derivative():
    Y, S = _pair(1)
    h = 1e-6
    fd = (state_at(MT, (Y, S), 0.3 + h) - state_at(MT, (Y, S), 0.3 - h)) / (2 * h)
    np.testing.assert_allclose(fd, true_velocity(MT, (Y, S)), atol=1e-8)


@given(st.floats(0, 1), st.floats(0, 1))
def test_transport_identity(t, r):
    """z_r == z_t + (r - t) v for any pair of times."""
    t, r = min(t, r), max(t, r)
    Y, S = _pair(2)
    z_t = state_at(MT, (Y, S), t)
    np.testing.assert_allclose(z_t + (r - t) * true_velocity(MT, (Y, S)), state_at(MT, (Y, S), r), atol=1e-12)


def test_background_path_passes_through_mixture():
    rng = np.random.default_rng(3)
    B, S = rng.standard_normal((2, 6, 4))
    tau = 0.37
    Y = (1 - tau) * B + tau * S
    np.testing.assert_allclose(state_at(BT, (B, S), tau), Y, atol=1e-15)
    assert endpoints_for(BT, Y, S, B) == (B, S)
    assert endpoints_for(MT, Y, S, B) == (Y, S)


def test_torch_inputs():
    Y, S = (torch.as_tensor(a) for a in _pair(4))
    out = state_at(MT, (Y, S), torch.tensor(0.25, dtype=torch.float64))
    assert isinstance(out, torch.Tensor)
    torch.testing.assert_close(out, 0.75 * Y + 0.25 * S)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(1e-3, 1))
def test_intermediate_time_inside_interval(a, b, alpha):
    iv = Interval(min(a, b), max(a, b))
    s = intermediate_time(iv, alpha)
    assert iv.t <= s <= iv.r


def test_intermediate_time_values():
    assert intermediate_time(Interval(0.2, 0.6), 1.0) == 0.6
    assert intermediate_time(Interval(0.2, 0.6), 0.25) == pytest.approx(0.3)
    np.testing.assert_allclose(intermediate_times([0.0, 0.5], [1.0, 0.9], 0.5), [0.5, 0.7])


def test_intermediate_state_closed_form():
    Y, S = _pair(5)
    rng = np.random.default_rng(6)
    for _ in range(200):
        t, r = np.sort(rng.uniform(size=2))
        alpha = rng.uniform(0.01, 1)
        s = alpha * r + (1 - alpha) * t
        np.testing.assert_allclose(intermediate_state(MT, (Y, S), Interval(t, r), alpha), (1 - s) * Y + s * S,
                                   rtol=0, atol=1e-14)


def test_validation():
    with pytest.raises(ValidationError):
        Interval(0.6, 0.5)
    with pytest.raises(ValidationError):
        Interval(-0.1, 0.5)
    Y, S = _pair()
    with pytest.raises(ValidationError):
        state_at(MT, (Y, S[:3]), 0.5)
    with pytest.raises(ValidationError):
        state_at(MT, (Y, S), 1.5)
    with pytest.raises(ValidationError):
        intermediate_time(Interval(0.1, 0.5), 0.0)
    assert Interval(0.25, 0.75).delta == 0.5
