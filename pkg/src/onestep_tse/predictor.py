"""Mean-velocity network and mixing-ratio regressor.

The mean-velocity network maps a state spectrogram ``z`` (2F x T), an
enrollment spectrogram ``E`` (2F x T_e) and an interval ``(t, r)`` to a
velocity with the shape of ``z``. Enrollment frames are prepended to the
state frames as a prefix; only the state positions are read out.

The reference backbone is a small U-shaped transformer: per-frame tokens,
adaptive layer norm driven by ``emb(t) + emb(r - t)`` in every block, and
long skips from the first half of the stack to the second. The output head
is zero-initialised, so a fresh network predicts zero velocity.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NonFiniteLossError, ValidationError
from .frontend import StftConfig, Waveform, stft

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PredictorConfig:
    channels: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    width: int = 128
    time_embed_dim: int = 64
    max_prefix_frames: int = 256
    mlp_ratio: int = 2
    magnitude_features: bool = True
    gated_head: bool = True
    enroll_profile: bool = True

    def __post_init__(self):
        for name in ("channels", "n_blocks", "n_heads", "width", "time_embed_dim", "max_prefix_frames", "mlp_ratio"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.width % self.n_heads:
            raise ValidationError(f"width={self.width} is not divisible by n_heads={self.n_heads}")
        if self.channels % 2:
            raise ValidationError("channels must be even (real and imaginary halves)")
        if self.time_embed_dim % 2:
            raise ValidationError("time_embed_dim must be even")


def sinusoidal_embedding(x: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    """Standard sin/cos embedding of scalars in [0, 1]; ``x`` has shape (B,)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=x.dtype, device=x.device) / half)
    args = scale * x[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _positions(n: int, dim: int, dtype) -> torch.Tensor:
    pos = torch.arange(n, dtype=dtype)
    return sinusoidal_embedding(pos, dim, scale=1.0)


class TimeEmbedding(nn.Module):
    def __init__(self, embed_dim: int, width: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.mlp = nn.Sequential(nn.Linear(embed_dim, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, x):
        return self.mlp(sinusoidal_embedding(x, self.embed_dim))


def _modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class Block(nn.Module):
    """Pre-norm transformer block with adaptive layer norm and zero-init gates."""

    def __init__(self, width: int, n_heads: int, mlp_ratio: int, skip: bool = False):
        super().__init__()
        self.n_heads = n_heads
        self.skip = nn.Linear(2 * width, width) if skip else None
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width), nn.GELU(approximate="tanh"), nn.Linear(mlp_ratio * width, width)
        )
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x, c, skip=None):
        if self.skip is not None:
            x = self.skip(torch.cat([x, skip], dim=-1))
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(c).chunk(6, dim=-1)
        h = _modulate(self.norm1(x), shift1, scale1)
        b, n, w = h.shape
        q, k, v = self.qkv(h).view(b, n, 3, self.n_heads, w // self.n_heads).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v)
        a = a.transpose(1, 2).reshape(b, n, w)
        x = x + gate1[:, None] * self.proj(a)
        h = _modulate(self.norm2(x), shift2, scale2)
        return x + gate2[:, None] * self.mlp(h)


class MeanVelocityNet(nn.Module):
    """u(z, t, r; E) on batched inputs: z (B, 2F, T), E (B, 2F, T_e), t and r (B,)."""

    def __init__(self, cfg: PredictorConfig = PredictorConfig()):
        super().__init__()
        self.cfg = cfg
        n_freq = cfg.channels // 2
        n_in = cfg.channels + (n_freq if cfg.magnitude_features else 0) + (n_freq if cfg.enroll_profile else 0)
        self.embed = nn.Linear(n_in, cfg.width)
        self.segment = nn.Parameter(torch.zeros(2, cfg.width))
        nn.init.normal_(self.segment, std=0.02)
        self.t_embed = TimeEmbedding(cfg.time_embed_dim, cfg.width)
        self.d_embed = TimeEmbedding(cfg.time_embed_dim, cfg.width)
        half = cfg.n_blocks // 2
        self.blocks = nn.ModuleList(
            [Block(cfg.width, cfg.n_heads, cfg.mlp_ratio, skip=i >= cfg.n_blocks - half) for i in range(cfg.n_blocks)]
        )
        self.norm_out = nn.LayerNorm(cfg.width, elementwise_affine=False, eps=1e-6)
        self.ada_out = nn.Sequential(nn.SiLU(), nn.Linear(cfg.width, 2 * cfg.width))
        nn.init.zeros_(self.ada_out[1].weight)
        nn.init.zeros_(self.ada_out[1].bias)
        self.head = nn.Linear(cfg.width, cfg.channels)
        self.gate_head = nn.Linear(cfg.width, cfg.channels) if cfg.gated_head else None
        self.zero_output()

    def zero_output(self):
        """Reset the output projections so the network predicts exactly zero."""
        with torch.no_grad():
            for lin in (self.head, self.gate_head):
                if lin is not None:
                    lin.weight.zero_()
                    lin.bias.zero_()

    @staticmethod
    def _logmag(x):
        n = x.shape[1] // 2
        return 0.5 * torch.log(x[:, :n] ** 2 + x[:, n:] ** 2 + 1e-6)

    def _features(self, x, profile):
        feats = [x.transpose(1, 2)]
        if self.cfg.magnitude_features:
            feats.append(self._logmag(x).transpose(1, 2))
        if profile is not None:
            feats.append(profile[:, None].expand(-1, x.shape[-1], -1))
        return self.embed(torch.cat(feats, dim=-1))

    def forward(self, z, E, t, r):
        n_pre, n_mix = E.shape[-1], z.shape[-1]
        w = self.cfg.width
        # long-term enrollment spectrum, broadcast to every token
        profile = self._logmag(E).mean(-1) if self.cfg.enroll_profile else None
        pre = self._features(E, profile) + self.segment[0] + _positions(n_pre, w, z.dtype)
        mix = self._features(z, profile) + self.segment[1] + _positions(n_mix, w, z.dtype)
        x = torch.cat([pre, mix], dim=1)
        c = self.t_embed(t) + self.d_embed(r - t)

        skips = []
        half = self.cfg.n_blocks // 2
        for i, block in enumerate(self.blocks):
            if block.skip is not None:
                x = block(x, c, skips.pop())
            else:
                x = block(x, c)
                if i < half:
                    skips.append(x)
        shift, scale = self.ada_out(c).chunk(2, dim=-1)
        h = _modulate(self.norm_out(x), shift, scale)[:, n_pre:]
        u = self.head(h).transpose(1, 2)
        if self.gate_head is not None:
            # complex gain applied to the input state
            g = self.gate_head(h).transpose(1, 2)
            n = z.shape[1] // 2
            gr, gi, zr, zi = g[:, :n], g[:, n:], z[:, :n], z[:, n:]
            u = u + torch.cat([gr * zr - gi * zi, gr * zi + gi * zr], dim=1)
        return u


def _to_tensor(x, dtype):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _time_tensor(x, batch, dtype):
    x = _to_tensor(x, dtype).reshape(-1)
    if x.numel() == 1:
        x = x.expand(batch)
    if x.numel() != batch:
        raise ValidationError(f"expected {batch} time values, got {x.numel()}")
    return x


def param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def mean_velocity(model: MeanVelocityNet, z, E, t, r):
    """Evaluate ``u(z, t, r; E)``; accepts one example (2F, T) or a batch (B, 2F, T).

    numpy inputs give a numpy result; tensor inputs keep the autograd graph.
    Enrollment longer than ``max_prefix_frames`` keeps only its last frames.
    """
    as_numpy = not isinstance(z, torch.Tensor)
    dtype = param_dtype(model)
    z_t = _to_tensor(z, dtype)
    E_t = _to_tensor(E, dtype)
    single = z_t.dim() == 2
    if single:
        z_t, E_t = z_t[None], E_t[None]
    if z_t.dim() != 3 or E_t.dim() != 3 or z_t.shape[0] != E_t.shape[0]:
        raise ValidationError(f"bad input shapes z={tuple(z_t.shape)}, E={tuple(E_t.shape)}")
    channels = model.cfg.channels
    if z_t.shape[1] != channels or E_t.shape[1] != channels:
        raise ValidationError(f"expected {channels} channels, got z={z_t.shape[1]}, E={E_t.shape[1]}")
    if z_t.shape[-1] < 1 or E_t.shape[-1] < 1:
        raise ValidationError("state and enrollment need at least one frame")
    if not (torch.isfinite(z_t).all() and torch.isfinite(E_t).all()):
        raise ValidationError("non-finite values in network input")
    batch = z_t.shape[0]
    t_t = _time_tensor(t, batch, dtype)
    r_t = _time_tensor(r, batch, dtype)
    if bool(((t_t < 0) | (r_t > 1) | (t_t > r_t)).any()):
        raise ValidationError("interval must satisfy 0 <= t <= r <= 1")
    limit = model.cfg.max_prefix_frames
    if E_t.shape[-1] > limit:
        log.warning("enrollment has %d frames; keeping the last %d", E_t.shape[-1], limit)
        E_t = E_t[..., -limit:]
    if as_numpy:
        with torch.no_grad():
            out = model(z_t, E_t, t_t, r_t)
    else:
        out = model(z_t, E_t, t_t, r_t)
    if single:
        out = out[0]
    return out.detach().numpy() if as_numpy else out


def stop_gradient_eval(model: MeanVelocityNet, z, E, t, r):
    """Same value as :func:`mean_velocity`, detached from every graph."""
    with torch.no_grad():
        out = mean_velocity(model, z, E, t, r)
    return out.detach() if isinstance(out, torch.Tensor) else out


def gradient(model: nn.Module, loss_fn) -> "OrderedDict[str, torch.Tensor]":
    """Reverse-mode gradient of the scalar ``loss_fn(model)`` for every named parameter."""
    names, params = zip(*model.named_parameters())
    loss = loss_fn(model)
    if not torch.isfinite(loss).all():
        raise NonFiniteLossError("loss", {"value": float(loss.detach())})
    if not loss.requires_grad:
        return OrderedDict((n, torch.zeros_like(p)) for n, p in zip(names, params))
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return OrderedDict((n, torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads))


# ---------------------------------------------------------------------------
# mixing-ratio regressor


@dataclass(frozen=True)
class MRConfig:
    n_fft: int = 126
    hop: int = 32
    hidden: int = 64
    n_layers: int = 3
    n_bands: int = 4
    dropout: float = 0.2
    mask_augment: bool = False
    max_time_mask: int = 8
    max_freq_mask: int = 4

    def __post_init__(self):
        if self.n_bands < 1 or self.n_bands > self.n_fft // 2 + 1:
            raise ValidationError("n_bands must lie in [1, n_freq]")
        self.stft  # validates n_fft / hop

    @property
    def stft(self) -> StftConfig:
        return StftConfig(n_fft=self.n_fft, hop=self.hop)

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1


_LOG_SCALE = 5.0


class MRRegressor(nn.Module):
    """Strided-conv encoder + statistics pooling + two-layer head -> logit of tau.

    Besides the learned pooled statistics, the head sees how strongly the
    mixture's average power spectrum projects onto the enrollment's, overall
    and per frequency band. That ratio tracks the target's share of the mix
    independently of who is speaking.
    """

    def __init__(self, cfg: MRConfig = MRConfig()):
        super().__init__()
        self.cfg = cfg

        def encoder():
            layers, n_in = [], cfg.n_freq
            for i in range(cfg.n_layers):
                layers += [nn.Conv1d(n_in, cfg.hidden, 5, stride=2 if i else 1, padding=2), nn.ReLU()]
                n_in = cfg.hidden
            return nn.Sequential(*layers)

        self.mix_encoder = encoder()
        self.enroll_encoder = encoder()
        n_pool = 4 * cfg.hidden + self.n_projection_stats
        self.pool_dropout = nn.Dropout(cfg.dropout)
        self.head = nn.Sequential(nn.Linear(n_pool, cfg.hidden), nn.ReLU(), nn.Linear(cfg.hidden, 1))
        # direct path from the projection statistics, so a linear read-out is always available
        self.stats_skip = nn.Linear(self.n_projection_stats, 1)
        # the learned branch starts silent; training adds to the linear read-out
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    @property
    def n_projection_stats(self) -> int:
        return 3 + self.cfg.n_bands

    @staticmethod
    def _pool(h):
        return torch.cat([h.mean(-1), h.std(-1, unbiased=False)], dim=-1)

    def projection_stats(self, mix_feats, enroll_feats):
        """Speaker-independent summary of mixture vs enrollment average power, (B, 3 + n_bands)."""
        mix_p = mix_feats.exp().mean(-1)
        enr_p = enroll_feats.exp().mean(-1)

        def root_ratio(a, b):
            return ((a * b).sum(-1) / (b * b).sum(-1).clamp_min(1e-20)).clamp_min(0).sqrt()

        cosine = (mix_p * enr_p).sum(-1) / (mix_p.norm(dim=-1) * enr_p.norm(dim=-1)).clamp_min(1e-20)
        level = torch.log(mix_p.sum(-1).clamp_min(1e-20) / enr_p.sum(-1).clamp_min(1e-20))
        bands = [root_ratio(m, e) for m, e in zip(mix_p.tensor_split(self.cfg.n_bands, -1),
                                                  enr_p.tensor_split(self.cfg.n_bands, -1))]
        return torch.stack([root_ratio(mix_p, enr_p), cosine, level, *bands], dim=-1)

    @torch.no_grad()
    def fit_readout(self, mix_feats, enroll_feats, tau, ridge: float = 1e-6):
        """Least-squares fit of the skip read-out to ``logit(tau)``."""
        stats = self.projection_stats(mix_feats, enroll_feats).double()
        design = torch.cat([stats, torch.ones_like(stats[:, :1])], dim=-1)
        tau = torch.as_tensor(tau, dtype=torch.float64).clamp(1e-4, 1 - 1e-4)
        target = torch.log(tau / (1 - tau))
        gram = design.T @ design + ridge * len(tau) * torch.eye(design.shape[1], dtype=torch.float64)
        coef = torch.linalg.solve(gram, design.T @ target)
        self.stats_skip.weight.copy_(coef[:-1][None])
        self.stats_skip.bias.copy_(coef[-1:])

    def forward(self, mix_feats, enroll_feats):
        """Features are log-power spectra (B, F, T); returns pre-sigmoid logits (B,)."""
        stats = self.projection_stats(mix_feats, enroll_feats)
        # encoders see levels relative to the enrollment's mean log power
        ref = enroll_feats.mean(dim=(-2, -1), keepdim=True)
        learned = torch.cat(
            [
                self._pool(self.mix_encoder((mix_feats - ref) / _LOG_SCALE)),
                self._pool(self.enroll_encoder((enroll_feats - ref) / _LOG_SCALE)),
            ],
            dim=-1,
        )
        pooled = torch.cat([self.pool_dropout(learned), stats], dim=-1)
        return (self.head(pooled) + self.stats_skip(stats))[:, 0]


def log_power(S: np.ndarray) -> np.ndarray:
    """Log-power features (F, T) from a stacked (2F, T) spectrogram."""
    n = S.shape[-2] // 2
    return np.log(S[..., :n, :] ** 2 + S[..., n:, :] ** 2 + 1e-8)


def mask_features(feats: torch.Tensor, cfg: MRConfig, gen: torch.Generator) -> torch.Tensor:
    """Random time and frequency masking, one band of each per example."""
    out = feats.clone()
    b, n_f, n_t = out.shape
    fill = out.mean()
    for i in range(b):
        tw = int(torch.randint(0, cfg.max_time_mask + 1, (1,), generator=gen))
        t0 = int(torch.randint(0, max(n_t - tw, 1), (1,), generator=gen))
        fw = int(torch.randint(0, cfg.max_freq_mask + 1, (1,), generator=gen))
        f0 = int(torch.randint(0, max(n_f - fw, 1), (1,), generator=gen))
        out[i, :, t0 : t0 + tw] = fill
        out[i, f0 : f0 + fw, :] = fill
    return out


def mr_logit(model: MRRegressor, y, e):
    if len(np.asarray(y.samples if isinstance(y, Waveform) else y)) == 0:
        raise ValidationError("empty mixture")
    if len(np.asarray(e.samples if isinstance(e, Waveform) else e)) == 0:
        raise ValidationError("empty enrollment")
    dtype = param_dtype(model)
    mix = torch.as_tensor(log_power(stft(y, model.cfg.stft)), dtype=dtype)[None]
    enr = torch.as_tensor(log_power(stft(e, model.cfg.stft)), dtype=dtype)[None]
    with torch.no_grad():
        return float(model(mix, enr)[0])


def mr_predict(model: MRRegressor, y, e) -> float:
    """Estimated mixing ratio ``sigmoid(p(y, e))`` in (0, 1)."""
    return float(torch.sigmoid(torch.tensor(mr_logit(model, y, e), dtype=torch.float64)))
