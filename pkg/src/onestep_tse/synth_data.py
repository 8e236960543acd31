"""Synthetic two-talker mixtures with exactly known ground truth.

Each "speaker" is a harmonic complex whose fundamental stays inside a private
frequency band, with a speaker-specific spectral envelope and random AM/FM
envelopes per utterance. Mixtures are exact convex combinations

    y = (1 - tau) * b + tau * s

so the mixing ratio ``tau`` is known by construction.

On-disk layout written by :func:`generate_dataset`::

    <out>/manifest.jsonl          one JSON record per example
    <out>/<split>/<id>_{mix,target,background,enroll}.wav   float32 mono

Manifest record fields:

    id            example id, e.g. "train-000017"
    split         "train" | "val" | "test"
    mix, target, background, enroll
                  WAVE paths relative to the manifest directory
    target_speaker, interferer_speaker
                  integer speaker ids
    tau_star      mixing ratio used for the mix
    sample_rate   Hz
    duration      mixture duration in seconds
    noise_snr_db  SNR of the noise folded into the background, or null

The first line of the manifest is a header record ``{"kind": "header", ...}``
carrying the generator config and seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .errors import ValidationError
from .frontend import Waveform, read_wav, write_wav

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SynthConfig:
    sample_rate: int = 8000
    mix_samples: int = 1536
    enroll_samples: int = 1024
    n_speakers: int = 24
    f0_low: float = 600.0
    f0_high: float = 2000.0
    band_halfwidth: float = 0.02
    min_pair_ratio: float = 1.12
    # speakers sorted by pitch are dealt to splits with this repeating pattern
    split_pattern: tuple = ("train", "train", "train", "train", "val", "test")
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    tau_low: float = 0.3
    tau_high: float = 0.7
    rms: float = 0.1
    max_harmonic_hz: float = 3600.0
    noise_snr_db: float | None = None

    def __post_init__(self):
        if not 0.0 < self.tau_low <= self.tau_high < 1.0:
            raise ValidationError("tau range must satisfy 0 < tau_low <= tau_high < 1")
        if self.n_speakers < 4:
            raise ValidationError("need at least 4 speakers")
        if not set(self.split_pattern) >= set(SPLITS):
            raise ValidationError(f"split_pattern must mention every split {SPLITS}")

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


@dataclass(frozen=True)
class SyntheticSpeaker:
    id: int
    fundamental: float
    band: tuple
    harmonic_weights: np.ndarray = field(repr=False)
    modulation: dict = field(default_factory=dict)
    split: str = "train"


@dataclass
class MixtureExample:
    y: Waveform
    s: Waveform
    b: Waveform
    e: Waveform
    tau_star: float
    target_speaker: int = -1
    interferer_speaker: int = -1
    split: str = "train"
    id: str = ""
    snr_meta: float | None = None


def make_speakers(cfg: SynthConfig, rng: np.random.Generator) -> list[SyntheticSpeaker]:
    """Speakers with log-spaced, non-overlapping fundamental bands."""
    centres = np.geomspace(cfg.f0_low, cfg.f0_high, cfg.n_speakers)
    spacing = (cfg.f0_high / cfg.f0_low) ** (1.0 / (cfg.n_speakers - 1))
    if (1 + cfg.band_halfwidth) / (1 - cfg.band_halfwidth) >= spacing:
        raise ValidationError("band_halfwidth too wide for the requested speaker count")
    n_harm = int(cfg.max_harmonic_hz // cfg.f0_low)
    speakers = []
    for i, f0 in enumerate(centres):
        k = np.arange(1, n_harm + 1)
        tilt = rng.uniform(0.15, 0.45)
        formant = rng.uniform(500.0, 3000.0)
        width = rng.uniform(250.0, 600.0)
        env = np.exp(-tilt * (k - 1)) + 0.8 * np.exp(-0.5 * ((k * f0 - formant) / width) ** 2)
        modulation = {
            "am_rate": (rng.uniform(2.0, 4.0), rng.uniform(5.0, 8.0)),
            "am_depth": rng.uniform(0.3, 0.7),
            "vibrato_rate": rng.uniform(3.0, 7.0),
        }
        speakers.append(
            SyntheticSpeaker(
                id=i,
                fundamental=float(f0),
                band=(f0 * (1 - cfg.band_halfwidth), f0 * (1 + cfg.band_halfwidth)),
                harmonic_weights=env / env.max(),
                modulation=modulation,
                split=cfg.split_pattern[i % len(cfg.split_pattern)],
            )
        )
    return speakers


def render(speaker: SyntheticSpeaker, n_samples: int, rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    """One utterance of ``speaker``: random pitch contour, AM envelope and gating, RMS-normalised."""
    sr = cfg.sample_rate
    lo, hi = speaker.band
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    n = np.arange(n_samples) / sr
    base = mid + rng.uniform(-0.5, 0.5) * half
    vib = 0.45 * half * np.sin(2 * np.pi * speaker.modulation["vibrato_rate"] * n + rng.uniform(0, 2 * np.pi))
    f0 = np.clip(base + vib, lo, hi)
    phase = 2 * np.pi * np.cumsum(f0) / sr

    x = np.zeros(n_samples)
    weights = speaker.harmonic_weights * rng.uniform(0.85, 1.15, speaker.harmonic_weights.shape)
    for k, wk in enumerate(weights, start=1):
        if k * hi >= cfg.max_harmonic_hz:
            break
        x += wk * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    am_lo, am_hi = speaker.modulation["am_rate"]
    depth = speaker.modulation["am_depth"]
    x *= 1.0 + depth * np.sin(2 * np.pi * rng.uniform(am_lo, am_hi) * n + rng.uniform(0, 2 * np.pi))
    x *= _gate(n_samples, rng)
    return cfg.rms * x / np.sqrt(np.mean(x**2))


def _gate(n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Raised-cosine onset/offset with random positions near the edges."""
    idx = np.arange(n_samples)
    ramp = max(n_samples // 16, 2)
    onset = rng.uniform(0.0, 0.1) * n_samples
    offset = n_samples - rng.uniform(0.0, 0.1) * n_samples
    level = np.clip(np.minimum(idx - onset, offset - idx) / ramp, 0.0, 1.0)
    return np.sin(0.5 * np.pi * level) ** 2


def _band_noise(n_samples: int, rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    lo = rng.uniform(100.0, 0.2 * cfg.sample_rate)
    hi = min(lo * rng.uniform(2.0, 4.0), 0.45 * cfg.sample_rate)
    sos = butter(4, [lo, hi], btype="bandpass", fs=cfg.sample_rate, output="sos")
    noise = sosfilt(sos, rng.standard_normal(n_samples))
    return noise / np.sqrt(np.mean(noise**2))


def generate_example(speakers, rng: np.random.Generator, cfg: SynthConfig) -> MixtureExample:
    """Build one (mixture, target, background, enrollment, tau) tuple for a (target, interferer) pair."""
    target, interferer = speakers
    if target.id == interferer.id:
        raise ValidationError("target and interferer must be distinct speakers")
    s = render(target, cfg.mix_samples, rng, cfg)
    b = render(interferer, cfg.mix_samples, rng, cfg)
    snr = cfg.noise_snr_db
    if snr is not None:
        noise = _band_noise(cfg.mix_samples, rng, cfg) * cfg.rms * 10 ** (-snr / 20)
        b = b + noise
        b = cfg.rms * b / np.sqrt(np.mean(b**2))
    e = render(target, cfg.enroll_samples, rng, cfg)
    tau = float(rng.uniform(cfg.tau_low, cfg.tau_high))
    y = (1 - tau) * b + tau * s
    sr = cfg.sample_rate
    return MixtureExample(
        y=Waveform(y, sr),
        s=Waveform(s, sr),
        b=Waveform(b, sr),
        e=Waveform(e, sr),
        tau_star=tau,
        target_speaker=target.id,
        interferer_speaker=interferer.id,
        snr_meta=snr,
    )


def _pick_pair(pool, rng, cfg):
    f0 = sorted(spk.fundamental for spk in pool)
    if f0[-1] / f0[0] < cfg.min_pair_ratio:
        raise ValidationError(f"no speaker pair in this split reaches min_pair_ratio={cfg.min_pair_ratio}")
    while True:
        i, j = rng.choice(len(pool), size=2, replace=False)
        a, b = pool[i], pool[j]
        ratio = max(a.fundamental, b.fundamental) / min(a.fundamental, b.fundamental)
        if ratio >= cfg.min_pair_ratio:
            return a, b


def generate_split(cfg: SynthConfig, seed: int, split: str, speakers=None) -> list[MixtureExample]:
    if speakers is None:
        speakers = make_speakers(cfg, np.random.default_rng(seed))
    pool = [spk for spk in speakers if spk.split == split]
    if len(pool) < 2:
        raise ValidationError(f"split {split!r} has fewer than two speakers")
    code = SPLITS.index(split)
    out = []
    for i in range(cfg.split_size(split)):
        rng = np.random.default_rng([seed, code, i])
        ex = generate_example(_pick_pair(pool, rng, cfg), rng, cfg)
        ex.split = split
        ex.id = f"{split}-{i:06d}"
        out.append(ex)
    return out


def generate_dataset(cfg: SynthConfig, seed: int, out_dir=None) -> dict[str, list[MixtureExample]]:
    """All three splits; speaker sets of the splits are disjoint.

    With ``out_dir`` the WAVE files and ``manifest.jsonl`` are written too.
    """
    speakers = make_speakers(cfg, np.random.default_rng(seed))
    data = {split: generate_split(cfg, seed, split, speakers) for split in SPLITS}
    if out_dir is not None:
        write_dataset(out_dir, data, cfg, seed)
    return data


def write_dataset(out_dir, data, cfg: SynthConfig, seed: int) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        header = {"kind": "header", "seed": seed, "config": asdict(cfg)}
        fh.write(json.dumps(header) + "\n")
        for split, examples in data.items():
            for ex in examples:
                paths = {}
                for role, w in (("mix", ex.y), ("target", ex.s), ("background", ex.b), ("enroll", ex.e)):
                    rel = f"{split}/{ex.id}_{role}.wav"
                    write_wav(out_dir / rel, w)
                    paths[role] = rel
                record = {
                    "id": ex.id,
                    "split": split,
                    **paths,
                    "target_speaker": ex.target_speaker,
                    "interferer_speaker": ex.interferer_speaker,
                    "tau_star": ex.tau_star,
                    "sample_rate": ex.y.sample_rate,
                    "duration": ex.y.duration,
                    "noise_snr_db": ex.snr_meta,
                }
                fh.write(json.dumps(record) + "\n")
    log.info("wrote %d examples to %s", sum(len(v) for v in data.values()), out_dir)
    return manifest


def read_manifest(path) -> tuple[dict, list[dict]]:
    header, records = {}, []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("kind") == "header":
                header = rec
                continue
            missing = {"id", "split", "mix", "target", "background", "enroll", "tau_star"} - rec.keys()
            if missing:
                raise ValidationError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            records.append(rec)
    return header, records


def load_dataset(manifest_path, splits=SPLITS) -> dict[str, list[MixtureExample]]:
    """Read examples back from a manifest written by :func:`write_dataset`."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    _, records = read_manifest(manifest_path)
    data = {split: [] for split in splits}
    for rec in records:
        if rec["split"] not in data:
            continue
        data[rec["split"]].append(
            MixtureExample(
                y=read_wav(root / rec["mix"]),
                s=read_wav(root / rec["target"]),
                b=read_wav(root / rec["background"]),
                e=read_wav(root / rec["enroll"]),
                tau_star=float(rec["tau_star"]),
                target_speaker=rec.get("target_speaker", -1),
                interferer_speaker=rec.get("interferer_speaker", -1),
                split=rec["split"],
                id=rec["id"],
                snr_meta=rec.get("noise_snr_db"),
            )
        )
    return data
