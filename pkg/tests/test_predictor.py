import logging

import numpy as np
import pytest
import torch
from torch import nn

from conftest import TINY, tiny_model
from onestep_tse.errors import NonFiniteLossError, ValidationError
from onestep_tse.frontend import Waveform
from onestep_tse.predictor import (MeanVelocityNet, MRConfig, MRRegressor, PredictorConfig, gradient,
                                   mean_velocity, mr_predict, stop_gradient_eval)


def _inputs(seed=0, T=11, Te=7, batch=None):
    rng = np.random.default_rng(seed)
    shape = (TINY.channels,) if batch is None else (batch, TINY.channels)
    return rng.standard_normal(shape + (T,)), rng.standard_normal(shape + (Te,))


def test_zero_initialised_output():
    model = MeanVelocityNet(TINY).double()
    for seed in range(3):
        z, E = _inputs(seed, T=5 + seed, Te=3 + 2 * seed)
        out = mean_velocity(model, z * 100, E, 0.0, 1.0)
        assert out.shape == z.shape and not out.any()


@pytest.mark.parametrize("T,Te", [(1, 1), (5, 40), (33, 2)])
def test_shape_covariance(T, Te):
    model = tiny_model()
    z, E = _inputs(1, T, Te)
    assert mean_velocity(model, z, E, 0.2, 0.7).shape == z.shape
    zb, Eb = _inputs(2, T, Te, batch=3)
    out = mean_velocity(model, torch.as_tensor(zb), torch.as_tensor(Eb), torch.tensor([0.0, 0.5, 0.9]), 1.0)
    assert tuple(out.shape) == zb.shape


def test_batch_matches_single_and_deterministic():
    model = tiny_model(1)
    z, E = _inputs(3, batch=2)
    both = mean_velocity(model, z, E, [0.1, 0.4], [0.5, 0.9])
    one = mean_velocity(model, z[1], E[1], 0.4, 0.9)
    np.testing.assert_allclose(both[1], one, atol=1e-12)
    assert np.array_equal(mean_velocity(model, z[0], E[0], 0.1, 0.5), mean_velocity(model, z[0], E[0], 0.1, 0.5))


def test_conditioning_signals_matter():
    model = tiny_model(2)
    z, E = _inputs(4)
    base = mean_velocity(model, z, E, 0.1, 0.6)
    assert np.linalg.norm(mean_velocity(model, z, E[:, ::-1].copy(), 0.1, 0.6) - base) > 0
    assert np.linalg.norm(mean_velocity(model, z, E, 0.1, 0.7) - base) > 0
    assert np.linalg.norm(mean_velocity(model, z, E, 0.2, 0.6) - base) > 0


def test_input_validation():
    model = tiny_model()
    z, E = _inputs()
    with pytest.raises(ValidationError):
        mean_velocity(model, z[:10], E, 0.0, 1.0)
    with pytest.raises(ValidationError):
        mean_velocity(model, z, E, 0.6, 0.5)
    with pytest.raises(ValidationError):
        mean_velocity(model, z, E, 0.0, 1.5)
    bad = z.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValidationError):
        mean_velocity(model, bad, E, 0.0, 1.0)
    with pytest.raises(ValidationError):
        PredictorConfig(width=30, n_heads=4)


def test_long_prefix_is_truncated(caplog):
    cfg = PredictorConfig(**{**TINY.__dict__, "max_prefix_frames": 4})
    torch.manual_seed(0)
    model = MeanVelocityNet(cfg).double()
    z, E = _inputs(5, Te=9)
    with caplog.at_level(logging.WARNING):
        full = mean_velocity(model, z, E, 0.0, 1.0)
    assert "keeping the last 4" in caplog.text
    np.testing.assert_array_equal(full, mean_velocity(model, z, E[:, -4:], 0.0, 1.0))


def test_stop_gradient_eval():
    model = tiny_model(3)
    z, E = (torch.as_tensor(a) for a in _inputs(6))
    a = stop_gradient_eval(model, z, E, 0.2, 0.8)
    b = mean_velocity(model, z, E, 0.2, 0.8)
    assert torch.equal(a, b.detach())
    for c in (1.0, -3.5):
        grads = gradient(model, lambda m: (stop_gradient_eval(m, z, E, 0.2, 0.8) * c).sum())
        assert all(not g.any() for g in grads.values())


def test_gradient_helper_linear_oracle():
    """d/dW mean((XW - Y)^2) = 2 X^T (XW - Y) / (n * k)."""
    rng = np.random.default_rng(7)
    X, Y = torch.as_tensor(rng.standard_normal((20, 4))), torch.as_tensor(rng.standard_normal((20, 3)))
    lin = nn.Linear(4, 3, bias=False).double()
    grads = gradient(lin, lambda m: ((m(X) - Y) ** 2).mean())
    W = lin.weight.detach().T
    analytic = 2 * X.T @ (X @ W - Y) / Y.numel()
    torch.testing.assert_close(grads["weight"], analytic.T, rtol=1e-12, atol=1e-14)
    assert all(not g.any() for g in gradient(lin, lambda m: torch.tensor(3.0)).values())
    with pytest.raises(NonFiniteLossError):
        gradient(lin, lambda m: m(X).sum() * float("nan"))


def test_mr_head_zero_gives_half():
    model = MRRegressor(MRConfig()).double()
    with torch.no_grad():
        model.stats_skip.weight.zero_()
        model.stats_skip.bias.zero_()
    x = Waveform(np.random.default_rng(8).standard_normal(1536), 8000)
    assert mr_predict(model, x, x) == 0.5
    with torch.no_grad():
        model.head[-1].bias.fill_(50.0)
    assert 0.5 < mr_predict(model, x, x) <= 1.0
