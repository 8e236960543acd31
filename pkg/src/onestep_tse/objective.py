"""Training losses: flow-matching anchor and teacher-student interval consistency.

Both branches regress the network output ``u(z_t, t, r; E)`` onto a target
velocity and reduce the residual ``D`` with the per-sample mean squared error
``m(D) = ||D||_F^2 / (2F T)``:

* FM branch (r == t): target is the path velocity ``v``; loss
  ``sg((m + eps_adp)^(gamma - 1)) * m``.
* MF branch (t < r): target ``alpha * v + (1 - alpha) * sg(u(z_s, s, r; E))``
  with ``s = alpha r + (1 - alpha) t`` and ``z_s`` taken from the path in
  closed form; loss ``sg(kappa / (m + alpha kappa + eps)) * m``.

The weights are detached, so gradients are always ``weight * grad m``. The
teacher is a plain forward pass under ``torch.no_grad``; no derivative of the
network with respect to time is ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ValidationError
from .predictor import param_dtype
from .schedules import Branch, IntervalSample
from .trajectory import Interval, PathKind, intermediate_times, state_at, true_velocity


@dataclass(frozen=True)
class ObjectiveConfig:
    gamma: float = 0.5
    eps_adp: float = 1e-3
    kappa: float = 1.0
    eps_bnd: float = 1e-6
    lambda_fm: float = 0.6
    lambda_mf: float = 0.4
    rho: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValidationError("gamma must lie in [0, 1]")
        if self.eps_adp < 0 or self.eps_bnd < 0:
            raise ValidationError("epsilons must be non-negative")
        if self.kappa <= 0 or self.lambda_fm <= 0 or self.lambda_mf <= 0:
            raise ValidationError("kappa and branch weights must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValidationError("rho must lie in [0, 1]")


@dataclass
class LossBreakdown:
    branch: str
    raw_mse: float
    weighted: float
    total: float
    alpha: float | None = None
    count: int = 1
    value: torch.Tensor | None = field(default=None, repr=False, compare=False)


@dataclass
class SpectralBatch:
    """Stacked spectra of a batch: Y, S, B (N, 2F, T), E (N, 2F, T_e), tau (N,)."""

    Y: torch.Tensor
    S: torch.Tensor
    B: torch.Tensor
    E: torch.Tensor
    tau: torch.Tensor | None = None

    def __post_init__(self):
        for name in ("Y", "S", "B", "E"):
            x = torch.as_tensor(getattr(self, name), dtype=torch.float64)
            if x.dim() == 2:
                x = x[None]
            setattr(self, name, x)
        if self.tau is not None:
            self.tau = torch.as_tensor(self.tau, dtype=torch.float64).reshape(-1)
        if not (self.Y.shape == self.S.shape == self.B.shape):
            raise ValidationError("Y, S and B must share a shape")
        if self.E.shape[0] != self.Y.shape[0] or self.E.shape[1] != self.Y.shape[1]:
            raise ValidationError("E must match Y in batch size and channel count")

    def __len__(self):
        return self.Y.shape[0]

    def __getitem__(self, idx):
        tau = None if self.tau is None else self.tau[idx]
        return SpectralBatch(self.Y[idx], self.S[idx], self.B[idx], self.E[idx], tau)

    def endpoints(self, kind: PathKind):
        if PathKind(kind) is PathKind.MIXTURE_TO_TARGET:
            return self.Y, self.S
        return self.B, self.S


def per_sample_mse(D):
    """Mean of squares over the last two axes (one value per example if batched)."""
    if isinstance(D, torch.Tensor):
        return (D**2).mean(dim=(-2, -1))
    D = np.asarray(D, dtype=np.float64)
    return (D**2).mean(axis=(-2, -1))


def adaptive_weight(m, cfg: ObjectiveConfig):
    if isinstance(m, torch.Tensor):
        return ((m.detach() + cfg.eps_adp) ** (cfg.gamma - 1.0)).detach()
    return (np.asarray(m) + cfg.eps_adp) ** (cfg.gamma - 1.0)


def adaptive_weight_loss(D, cfg: ObjectiveConfig):
    m = per_sample_mse(D)
    return adaptive_weight(m, cfg) * m


def bounded_weight(m, alpha: float, cfg: ObjectiveConfig):
    if isinstance(m, torch.Tensor):
        m = m.detach()
    return cfg.kappa / (m + alpha * cfg.kappa + cfg.eps_bnd)


def bounded_loss(D, alpha: float, cfg: ObjectiveConfig):
    if not 0.0 < alpha <= 1.0:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha}")
    m = per_sample_mse(D)
    return bounded_weight(m, alpha, cfg) * m


def alpha_target(v, teacher_u, alpha: float):
    """``alpha * v + (1 - alpha) * teacher_u``; returns ``v`` itself at alpha == 1.

    Evaluated as ``v + (1 - alpha) * (teacher_u - v)`` so that a teacher
    agreeing with ``v`` reproduces it exactly.
    """
    if tuple(v.shape) != tuple(teacher_u.shape):
        raise ValidationError(f"shape mismatch: {tuple(v.shape)} vs {tuple(teacher_u.shape)}")
    if not 0.0 < alpha <= 1.0:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return v
    return v + (1.0 - alpha) * (teacher_u - v)


def _col(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))[:, None, None]


def _default_teacher(model):
    def teacher(z, E, t, r):
        with torch.no_grad():
            return model(z, E, t, r)

    return teacher


def batch_losses(model, batch: SpectralBatch, t, r, is_fm, alpha: float, cfg: ObjectiveConfig,
                 kind: PathKind = PathKind.MIXTURE_TO_TARGET, teacher=None):
    """Per-example losses for a batch whose examples carry their own branch.

    ``t``, ``r`` and ``is_fm`` are length-N arrays (FM rows must have t == r).
    The student runs once over the whole batch; the teacher runs once over the
    MF rows. Returns a dict of (N,) tensors: ``raw``, ``weighted``, ``total``,
    and the scalar mean ``loss``; also the residual ``student - target`` and
    the ``target`` itself.
    """
    t = np.asarray(t, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    is_fm = np.asarray(is_fm, dtype=bool)
    if np.any(is_fm & (t != r)):
        raise ValidationError("FM rows need t == r")
    if np.any(~is_fm & (t >= r)):
        raise ValidationError("MF rows need t < r")
    dtype = param_dtype(model)
    endpoints = batch.endpoints(kind)
    v = true_velocity(kind, endpoints)
    z_t = state_at(kind, endpoints, _col(t))
    t_net = torch.as_tensor(t, dtype=dtype)
    r_net = torch.as_tensor(r, dtype=dtype)
    E = batch.E.to(dtype)
    student = model(z_t.to(dtype), E, t_net, r_net)

    target = v.to(dtype).clone()
    mf = np.flatnonzero(~is_fm)
    if mf.size and alpha < 1.0:
        if teacher is None:
            teacher = _default_teacher(model)
        s = intermediate_times(t[mf], r[mf], alpha)
        z_s = state_at(kind, (endpoints[0][mf], endpoints[1][mf]), _col(s))
        with torch.no_grad():
            u_teacher = teacher(z_s.to(dtype), E[mf], torch.as_tensor(s, dtype=dtype), r_net[mf]).detach()
        target[mf] = alpha_target(target[mf], u_teacher, alpha)

    D = student - target
    raw = per_sample_mse(D)
    fm_mask = torch.as_tensor(is_fm)
    weight = torch.where(fm_mask, adaptive_weight(raw, cfg), bounded_weight(raw, alpha, cfg))
    weighted = weight * raw
    lam = torch.where(fm_mask, torch.tensor(cfg.lambda_fm, dtype=dtype), torch.tensor(cfg.lambda_mf, dtype=dtype))
    total = lam * weighted
    return {"raw": raw, "weighted": weighted, "total": total, "loss": total.mean(), "residual": D,
            "target": target}


def _breakdown(out, branch: Branch, alpha):
    return LossBreakdown(
        branch=branch.value,
        raw_mse=float(out["raw"].detach().mean()),
        weighted=float(out["weighted"].detach().mean()),
        total=float(out["total"].detach().mean()),
        alpha=alpha,
        count=int(out["raw"].shape[0]),
        value=out["loss"],
    )


def fm_branch_loss(model, batch: SpectralBatch, t: float, cfg: ObjectiveConfig,
                   kind: PathKind = PathKind.MIXTURE_TO_TARGET) -> LossBreakdown:
    """Anchor loss with the student queried on the diagonal (t, t)."""
    if not 0.0 < t < 1.0:
        raise ValidationError(f"FM time must lie in (0, 1), got {t}")
    n = len(batch)
    out = batch_losses(model, batch, np.full(n, t), np.full(n, t), np.ones(n, bool), 1.0, cfg, kind)
    return _breakdown(out, Branch.FM, None)


def mf_branch_loss(model, batch: SpectralBatch, iv: Interval, alpha: float, cfg: ObjectiveConfig,
                   kind: PathKind = PathKind.MIXTURE_TO_TARGET, teacher=None) -> LossBreakdown:
    """Interval-consistency loss; ``teacher`` defaults to a no-grad pass of ``model``."""
    if not iv.t < iv.r:
        raise ValidationError(f"MF branch needs t < r, got t={iv.t}, r={iv.r}")
    if not 0.0 < alpha <= 1.0:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha}")
    n = len(batch)
    out = batch_losses(model, batch, np.full(n, iv.t), np.full(n, iv.r), np.zeros(n, bool), alpha, cfg, kind, teacher)
    return _breakdown(out, Branch.MF, alpha)


def total_loss(model, batch: SpectralBatch, sampled: IntervalSample, cfg: ObjectiveConfig,
               kind: PathKind = PathKind.MIXTURE_TO_TARGET) -> LossBreakdown:
    """Evaluate exactly the branch named by ``sampled``, scaled by its lambda."""
    if sampled.branch is Branch.FM:
        return fm_branch_loss(model, batch, sampled.t, cfg, kind)
    return mf_branch_loss(model, batch, Interval(sampled.t, sampled.r), sampled.alpha, cfg, kind)
