"""Alpha annealing schedule and (t, r) interval / branch samplers."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .trajectory import Interval, intermediate_time


class Branch(str, enum.Enum):
    FM = "fm"
    MF = "mf"


@dataclass(frozen=True)
class AlphaSchedule:
    start_epoch: float = 5.0
    end_epoch: float = 100.0
    steepness: float = 15.0
    alpha_min: float = 0.1

    def __post_init__(self):
        if not self.start_epoch < self.end_epoch:
            raise ValidationError("alpha schedule needs start_epoch < end_epoch")
        if not 0.0 < self.alpha_min < 1.0:
            raise ValidationError("alpha_min must lie in (0, 1)")
        if self.steepness <= 0:
            raise ValidationError("steepness must be positive")


def alpha_at(schedule: AlphaSchedule, epoch: float) -> float:
    """Sigmoid anneal from ~1 down to ``alpha_min`` between start and end epochs.

    alpha(e) = a_min + (1 - a_min) * logistic(-k * (p - 1/2)),
    p = clamp((e - k_s) / (k_e - k_s), 0, 1)
    """
    if epoch < 0:
        raise ValidationError(f"epoch must be non-negative, got {epoch}")
    p = (epoch - schedule.start_epoch) / (schedule.end_epoch - schedule.start_epoch)
    p = min(max(p, 0.0), 1.0)
    x = schedule.steepness * (p - 0.5)
    return schedule.alpha_min + (1.0 - schedule.alpha_min) / (1.0 + math.exp(x))


@dataclass(frozen=True)
class TimeSamplerConfig:
    mu: float = -0.4
    sigma: float = 1.0
    large_span_prob: float = 0.15
    t_max_large: float = 0.15
    r_min_large: float = 0.85

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValidationError("sigma must be positive")
        if not 0.0 <= self.large_span_prob <= 1.0:
            raise ValidationError("large_span_prob must lie in [0, 1]")
        if not 0.0 < self.t_max_large < self.r_min_large < 1.0:
            raise ValidationError("need 0 < t_max_large < r_min_large < 1")


@dataclass(frozen=True)
class IntervalSample:
    """One supervision draw: branch, interval, alpha and teacher time."""

    t: float
    r: float
    alpha: float
    s: float
    branch: Branch

    def __post_init__(self):
        if self.branch is Branch.FM and self.t != self.r:
            raise ValidationError("FM samples must have t == r")
        if self.branch is Branch.MF and not self.t < self.r:
            raise ValidationError("MF samples must have t < r")


def logit_normal(cfg: TimeSamplerConfig, rng: np.random.Generator, size=None):
    """sigmoid(N(mu, sigma^2)), redrawn on the (practically impossible) hit of 0 or 1."""
    x = 1.0 / (1.0 + np.exp(-(cfg.mu + cfg.sigma * rng.standard_normal(size))))
    if size is None:
        while not 0.0 < x < 1.0:
            x = 1.0 / (1.0 + np.exp(-(cfg.mu + cfg.sigma * rng.standard_normal())))
        return float(x)
    bad = (x <= 0.0) | (x >= 1.0)
    while bad.any():
        x[bad] = 1.0 / (1.0 + np.exp(-(cfg.mu + cfg.sigma * rng.standard_normal(bad.sum()))))
        bad = (x <= 0.0) | (x >= 1.0)
    return x


def sample_interval(cfg: TimeSamplerConfig, rng: np.random.Generator) -> Interval:
    """Draw ``0 < t < r < 1``.

    With probability ``large_span_prob`` the pair comes from the large-span
    box (t uniform on (0, t_max], r uniform on [r_min, 1)); otherwise it is
    the sorted pair of two logit-normal draws.
    """
    if rng.random() < cfg.large_span_prob:
        t = cfg.t_max_large - rng.uniform(0.0, cfg.t_max_large)
        r = rng.uniform(cfg.r_min_large, 1.0)
        return Interval(float(t), float(r))
    while True:
        a = logit_normal(cfg, rng)
        b = logit_normal(cfg, rng)
        if a != b:
            return Interval(min(a, b), max(a, b))


def sample_fm_time(cfg: TimeSamplerConfig, rng: np.random.Generator) -> float:
    return logit_normal(cfg, rng)


def sample_branch(rho: float, rng: np.random.Generator) -> Branch:
    if not 0.0 <= rho <= 1.0:
        raise ValidationError(f"rho must lie in [0, 1], got {rho}")
    return Branch.FM if rng.random() < rho else Branch.MF


def draw(cfg: TimeSamplerConfig, rho: float, alpha: float, rng: np.random.Generator) -> IntervalSample:
    """Branch coin first, then the interval for that branch."""
    branch = sample_branch(rho, rng)
    if branch is Branch.FM:
        t = sample_fm_time(cfg, rng)
        return IntervalSample(t, t, alpha, t, branch)
    iv = sample_interval(cfg, rng)
    return IntervalSample(iv.t, iv.r, alpha, intermediate_time(iv, alpha), branch)
