"""Closed-form algebra of the straight transport paths.

Two paths are supported, both linear in time:

* mixture-to-target: ``z_t = (1 - t) Y + t S``
* background-to-target: ``x_t = (1 - t) B + t S``

Functions accept numpy arrays or torch tensors for the endpoints; ``t`` may be
a float or an array broadcastable against the endpoints (batched use).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


class PathKind(str, enum.Enum):
    MIXTURE_TO_TARGET = "mixture_to_target"
    BACKGROUND_TO_TARGET = "background_to_target"


@dataclass(frozen=True)
class Interval:
    t: float
    r: float

    def __post_init__(self):
        if not 0.0 <= self.t <= self.r <= 1.0:
            raise ValidationError(f"interval requires 0 <= t <= r <= 1, got t={self.t}, r={self.r}")

    @property
    def delta(self) -> float:
        return self.r - self.t


def _check_pair(start, end):
    if tuple(start.shape) != tuple(end.shape):
        raise ValidationError(f"endpoint shapes differ: {tuple(start.shape)} vs {tuple(end.shape)}")


def _check_time(t):
    arr = np.asarray(t.detach().cpu() if hasattr(t, "detach") else t, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
        raise ValidationError(f"time must lie in [0, 1], got {t}")


def state_at(kind: PathKind, endpoints, t):
    """Point on the path at time ``t``; exact at both ends."""
    start, end = endpoints
    _check_pair(start, end)
    _check_time(t)
    return (1 - t) * start + t * end


def true_velocity(kind: PathKind, endpoints):
    """Constant velocity of the path, ``end - start``."""
    start, end = endpoints
    _check_pair(start, end)
    return end - start


def intermediate_time(iv: Interval, alpha: float) -> float:
    """Teacher time ``alpha * r + (1 - alpha) * t``."""
    return float(intermediate_times(iv.t, iv.r, alpha))


def intermediate_times(t, r, alpha):
    """Vectorised :func:`intermediate_time` over arrays of ``t`` and ``r``."""
    if not 0.0 < alpha <= 1.0:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha}")
    t = np.asarray(t, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    # clamp guards against rounding just outside [t, r]; alpha == 1 gives r exactly
    return np.clip(alpha * r + (1 - alpha) * t, t, r)


def intermediate_state(kind: PathKind, endpoints, iv: Interval, alpha: float):
    return state_at(kind, endpoints, intermediate_time(iv, alpha))


def endpoints_for(kind: PathKind, mixture, target, background):
    """Select (start, end) for ``kind`` from the three spectra of an example."""
    kind = PathKind(kind)
    if kind is PathKind.MIXTURE_TO_TARGET:
        return mixture, target
    return background, target
