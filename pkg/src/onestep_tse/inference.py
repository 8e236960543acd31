"""One-step extraction: a single network evaluation per (chunk of) utterance.

A *predictor* is anything callable as ``u(z, E, t, r)`` on numpy spectrograms;
a :class:`MeanVelocityNet` is wrapped automatically. The same goes for the
mixing-ratio estimator, called as ``tau(y, e)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from torch import nn

from .errors import ValidationError
from .frontend import DESK_STFT, StftConfig, Waveform, chunk, concat_time, istft, stft
from .predictor import MRRegressor, mean_velocity, mr_predict


@dataclass(frozen=True)
class InferenceConfig:
    chunk_frames: int = 0
    use_mr: bool = False
    stft: StftConfig = DESK_STFT
    tau: float | None = None

    def __post_init__(self):
        if self.chunk_frames < 0:
            raise ValidationError("chunk_frames must be >= 0 (0 disables chunking)")
        if self.tau is not None and not 0.0 <= self.tau <= 1.0:
            raise ValidationError("forced tau must lie in [0, 1]")


def default_chunk_frames(crop_seconds: float, sample_rate: int, cfg: StftConfig) -> int:
    """Frames spanned by a training crop of ``crop_seconds``."""
    return cfg.n_frames(int(round(crop_seconds * sample_rate)))


class NFECounter:
    """Counts calls to the wrapped callable."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, *args):
        self.calls += 1
        return self.fn(*args)


def as_predictor(model):
    if isinstance(model, nn.Module):
        return lambda z, E, t, r: mean_velocity(model, z, E, t, r)
    if not callable(model):
        raise ValidationError("predictor must be a module or a callable u(z, E, t, r)")
    return model


def as_mr(mr):
    if isinstance(mr, MRRegressor):
        return lambda y, e: mr_predict(mr, y, e)
    if not callable(mr):
        raise ValidationError("MR estimator must be an MRRegressor or a callable tau(y, e)")
    return mr


def extract_one_step(predictor, Y: np.ndarray, E: np.ndarray) -> np.ndarray:
    """``Y + u(Y, 0, 1; E)``."""
    u = as_predictor(predictor)(Y, E, 0.0, 1.0)
    if np.shape(u) != np.shape(Y):
        raise ValidationError(f"predictor returned shape {np.shape(u)}, expected {np.shape(Y)}")
    return Y + u


def extract_one_step_mr(predictor, mr, y, e, Y: np.ndarray, E: np.ndarray, tau=None):
    """Jump from the estimated coordinate: ``Y + (1 - tau) u(Y, tau, 1; E)``.

    ``tau`` overrides the estimator (the estimator is then not called).
    Returns (estimate, tau used).
    """
    if tau is None:
        if mr is None:
            raise ValidationError("no MR estimator and no forced tau")
        tau = float(as_mr(mr)(y, e))
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")
    u = as_predictor(predictor)(Y, E, tau, 1.0)
    return Y + (1.0 - tau) * u, tau


def extract_spectrogram(predictor, Y, E, cfg: InferenceConfig, tau=None):
    """Chunk ``Y`` if requested, run one jump per chunk and stitch the results."""
    predictor = as_predictor(predictor)
    pieces = chunk(Y, cfg.chunk_frames) if cfg.chunk_frames else [Y]
    if tau is None:
        out = [extract_one_step(predictor, piece, E) for piece in pieces]
    else:
        out = [piece + (1.0 - tau) * predictor(piece, E, tau, 1.0) for piece in pieces]
    return concat_time(out)


def extract_utterance(predictor, y, e, cfg: InferenceConfig = InferenceConfig(), mr=None) -> Waveform:
    """stft -> (chunked) one-step jump -> concat -> istft; output length matches ``y``."""
    y_w = y if isinstance(y, Waveform) else Waveform(np.asarray(y), 16000)
    Y = stft(y_w, cfg.stft)
    E = stft(e, cfg.stft)
    tau = None
    if cfg.use_mr:
        tau = cfg.tau
        if tau is None:
            if mr is None:
                raise ValidationError("use_mr requires an MR estimator or a forced tau")
            tau = float(as_mr(mr)(y, e))
    S_hat = extract_spectrogram(predictor, Y, E, cfg, tau)
    return Waveform(istft(S_hat, cfg.stft, len(y_w)), y_w.sample_rate)
