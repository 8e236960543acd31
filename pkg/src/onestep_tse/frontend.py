"""Waveform <-> stacked real/imaginary STFT conversion, chunking and file I/O.

A spectrogram here is a real ``(2F, T)`` array: rows ``[0, F)`` hold the real
parts and rows ``[F, 2F)`` the imaginary parts of a one-sided complex STFT,
``F = n_fft // 2 + 1``.

Spectrogram dump format (little-endian)::

    offset  size  field
    0       4     magic  b"SPG1"
    4       4     uint32 channel count (2F)
    8       4     uint32 frame count (T)
    12      4     uint32 reserved, always 0
    16      4*2F*T float32 payload, row-major (channel-major) order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import check_NOLA, get_window

from .errors import SignalLengthError, ValidationError

SPEC_MAGIC = b"SPG1"
_HEADER = struct.Struct("<4sIII")


@lru_cache(maxsize=16)
def _window(name: str, n_fft: int) -> np.ndarray:
    win = get_window(name, n_fft, fftbins=True).astype(np.float64)
    win.setflags(write=False)
    return win


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValidationError(f"waveform must be 1-D, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValidationError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 510
    hop: int = 128
    window: str = "hann"

    def __post_init__(self):
        if self.n_fft <= 0 or self.n_fft % 2:
            raise ValidationError(f"n_fft must be a positive even integer, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ValidationError(f"hop must satisfy 0 < hop <= n_fft, got {self.hop}")
        if not check_NOLA(_window(self.window, self.n_fft), self.n_fft, self.n_fft - self.hop):
            raise ValidationError(
                f"window {self.window!r} is not invertible at n_fft={self.n_fft}, hop={self.hop}"
            )

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def channels(self) -> int:
        return 2 * self.n_freq

    def n_frames(self, n_samples: int) -> int:
        """Frame count produced by :func:`stft` for a signal of ``n_samples``."""
        return 1 + n_samples // self.hop


PAPER_STFT = StftConfig(n_fft=510, hop=128)
DESK_STFT = StftConfig(n_fft=62, hop=16)


def _as_samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    x = np.asarray(w, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError(f"waveform must be 1-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("waveform contains non-finite samples")
    return x


def stft(w, cfg: StftConfig = PAPER_STFT) -> np.ndarray:
    """Centered STFT with reflection padding, returned as a ``(2F, T)`` real array."""
    x = _as_samples(w)
    if x.shape[0] < cfg.n_fft:
        raise SignalLengthError(f"signal of {x.shape[0]} samples is shorter than n_fft={cfg.n_fft}")
    pad = cfg.n_fft // 2
    xp = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(xp, cfg.n_fft)[:: cfg.hop]
    spec = np.fft.rfft(frames * _window(cfg.window, cfg.n_fft), axis=1).T
    return np.concatenate([spec.real, spec.imag], axis=0)


def to_complex(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[0] % 2:
        raise ValidationError(f"expected a (2F, T) array, got shape {S.shape}")
    n = S.shape[0] // 2
    return S[:n] + 1j * S[n:]


def from_complex(X: np.ndarray) -> np.ndarray:
    return np.concatenate([X.real, X.imag], axis=0)


def istft(S: np.ndarray, cfg: StftConfig = PAPER_STFT, out_len: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    ``out_len`` defaults to ``hop * (T - 1)``, the longest length whose
    samples are all covered by analysis frames.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != cfg.channels:
        raise ValidationError(f"spectrogram shape {S.shape} does not match {cfg.channels} channels")
    if not np.all(np.isfinite(S)):
        raise ValidationError("spectrogram contains non-finite entries")
    n_frames = S.shape[1]
    if n_frames < 1:
        raise ValidationError("spectrogram has no frames")
    pad = cfg.n_fft // 2
    total = cfg.n_fft + cfg.hop * (n_frames - 1)
    if out_len is None:
        out_len = cfg.hop * (n_frames - 1)
    if not 0 <= out_len <= total - pad:
        raise ValidationError(f"out_len={out_len} exceeds the {total - pad} samples spanned by {n_frames} frames")

    win = _window(cfg.window, cfg.n_fft)
    frames = np.fft.irfft(to_complex(S), n=cfg.n_fft, axis=0).T * win
    out = np.zeros(total)
    norm = np.zeros(total)
    win_sq = win * win
    for i in range(n_frames):
        start = i * cfg.hop
        out[start : start + cfg.n_fft] += frames[i]
        norm[start : start + cfg.n_fft] += win_sq
    out = out[pad : pad + out_len]
    norm = norm[pad : pad + out_len]
    if out_len and norm.min() < 1e-10:
        raise ValidationError("window overlap vanishes inside the requested output span")
    return out / norm


def chunk(S: np.ndarray, chunk_frames: int) -> list[np.ndarray]:
    """Split along time into contiguous chunks; the last one may be shorter."""
    if chunk_frames <= 0:
        raise ValidationError(f"chunk_frames must be positive, got {chunk_frames}")
    S = np.asarray(S)
    if S.ndim != 2:
        raise ValidationError(f"expected a (2F, T) array, got shape {S.shape}")
    return [S[:, i : i + chunk_frames] for i in range(0, S.shape[1], chunk_frames)]


def concat_time(chunks) -> np.ndarray:
    chunks = [np.asarray(c) for c in chunks]
    if not chunks:
        raise ValidationError("nothing to concatenate")
    channels = {c.shape[0] for c in chunks}
    if len(channels) != 1 or any(c.ndim != 2 for c in chunks):
        raise ValidationError(f"chunks disagree on channel count: {sorted(channels)}")
    return np.concatenate(chunks, axis=1)


def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM or 32-bit float WAVE file."""
    if not Path(path).is_file():
        raise ValidationError(f"WAVE file not found: {path}")
    try:
        rate, data = wavfile.read(path)
    except ValueError as err:
        raise ValidationError(f"{path}: not a readable WAVE file ({err})") from None
    if data.ndim != 1:
        raise ValidationError(f"{path}: only single-channel audio is supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValidationError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(rate))


def write_wav(path, w: Waveform, fmt: str = "float32") -> None:
    if fmt == "float32":
        data = w.samples.astype(np.float32)
    elif fmt == "int16":
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValidationError(f"unknown WAVE sample format {fmt!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, w.sample_rate, data)


def write_spectrogram(path, S: np.ndarray) -> None:
    S = np.asarray(S)
    if S.ndim != 2:
        raise ValidationError(f"expected a (2F, T) array, got shape {S.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SPEC_MAGIC, S.shape[0], S.shape[1], 0))
        fh.write(np.ascontiguousarray(S, dtype="<f4").tobytes())


def read_spectrogram(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, channels, frames, _ = _HEADER.unpack_from(raw)
    if magic != SPEC_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * channels * frames
    if len(raw) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(channels, frames).astype(np.float64)
