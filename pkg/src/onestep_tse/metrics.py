"""Evaluation metrics and the mixing-ratio ablation report."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .frontend import StftConfig, Waveform, istft, stft
from .inference import as_predictor, extract_one_step, extract_one_step_mr
from .trajectory import PathKind

log = logging.getLogger(__name__)

SI_SDR_CEILING = 100.0
EMBED_BINS = 64
_EMBED_NFFT = 256


def _samples(x):
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def si_sdr(est, ref, ceiling: float = SI_SDR_CEILING) -> float:
    """Scale-invariant SDR in dB, clamped to ``[-ceiling, ceiling]``."""
    est, ref = _samples(est), _samples(ref)
    if est.shape != ref.shape:
        raise ValidationError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise ValidationError("reference signal is all zeros")
    scale = np.dot(est, ref) / ref_energy
    target = scale * ref
    resid = est - target
    num, den = np.dot(target, target), np.dot(resid, resid)
    if den == 0:
        return ceiling
    if num == 0:
        return -ceiling
    return float(np.clip(10 * np.log10(num / den), -ceiling, ceiling))


def spectral_mse(est_spec, ref_spec) -> float:
    est_spec, ref_spec = np.asarray(est_spec), np.asarray(ref_spec)
    if est_spec.shape != ref_spec.shape:
        raise ValidationError("spectrogram shapes differ")
    return float(np.mean((est_spec - ref_spec) ** 2))


def speaker_embedding(x, bins: int = EMBED_BINS) -> np.ndarray | None:
    """Long-term average log-magnitude spectrum pooled to ``bins`` values, centred, unit norm.

    Returns None for silent input.
    """
    x = _samples(x)
    if x.size == 0:
        raise ValidationError("empty signal")
    n_fft = min(_EMBED_NFFT, 2 * (x.size // 2)) or 2
    if x.size < n_fft or not np.any(x):
        return None
    power = np.mean(np.abs(np.fft.rfft(_frames(x, n_fft) * np.hanning(n_fft), axis=1)) ** 2, axis=0)
    if power.max() <= 0:
        return None
    logmag = 0.5 * np.log10(power + 1e-6 * power.max())
    pooled = np.array([g.mean() for g in np.array_split(logmag, bins)])
    pooled -= pooled.mean()
    norm = np.linalg.norm(pooled)
    return pooled / norm if norm > 0 else None


def _frames(x, n_fft):
    hop = n_fft // 4
    n = 1 + (x.size - n_fft) // hop
    return np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:n]


def spk_sim(est, anchor) -> float:
    """Cosine similarity of :func:`speaker_embedding` vectors; 0 (with a warning) for silence."""
    a, b = speaker_embedding(est), speaker_embedding(anchor)
    if a is None or b is None:
        warnings.warn("silent input to spk_sim; similarity defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    tags: dict = field(default_factory=dict)

    def aggregate(self) -> dict:
        out = {"count": len(self.rows)}
        for key in ("si_sdr", "si_sdr_mix", "si_sdr_improvement", "spectral_mse", "spk_sim", "spk_sim_enroll", "spk_sim_cross"):
            vals = [r[key] for r in self.rows if key in r and np.isfinite(r[key])]
            if vals:
                out[key] = float(np.mean(vals))
        return out

    def write_csv(self, path):
        if not self.rows:
            raise ValidationError("empty report")
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        keys = list(self.rows[0].keys())
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.rows)


def evaluate_example(S_hat, ex, stft_cfg: StftConfig) -> dict:
    s_hat = istft(S_hat, stft_cfg, len(ex.y))
    S = stft(ex.s, stft_cfg)
    sdr = si_sdr(s_hat, ex.s)
    sdr_mix = si_sdr(ex.y, ex.s)
    return {
        "id": ex.id,
        "si_sdr": sdr,
        "si_sdr_mix": sdr_mix,
        "si_sdr_improvement": sdr - sdr_mix,
        "spectral_mse": spectral_mse(S_hat, S),
        "spk_sim": spk_sim(s_hat, ex.s),
        "spk_sim_enroll": spk_sim(s_hat, ex.e),
        "spk_sim_cross": spk_sim(s_hat, ex.b),
    }


def evaluate(predictor, examples, stft_cfg: StftConfig, kind: PathKind = PathKind.MIXTURE_TO_TARGET,
             tau_source: str = "native", mr=None, tags=None) -> EvalReport:
    """One-step extraction over ``examples`` and per-example metrics.

    ``tau_source`` picks the start coordinate: ``native`` (mixture start,
    t = 0, for mixture-to-target models), ``predicted`` (MR estimator),
    ``forced_zero`` or ``forced_true`` (the known tau_star). Passing
    ``predictor="oracle"`` scores the ideal velocity ``S - Y`` instead of a
    model, which checks the pipeline itself.
    """
    oracle = isinstance(predictor, str) and predictor == "oracle"
    predictor = None if oracle else as_predictor(predictor)
    kind = PathKind(kind)
    report = EvalReport(tags={"path_kind": kind.value, "tau_source": tau_source, **(tags or {})})
    for ex in examples:
        Y = stft(ex.y, stft_cfg)
        E = stft(ex.e, stft_cfg)
        tau_used = 0.0
        if oracle:
            ideal = stft(ex.s, stft_cfg) - Y
            S_hat = extract_one_step(lambda z, E, t, r: ideal, Y, E)
        elif tau_source == "native":
            S_hat = extract_one_step(predictor, Y, E)
        elif tau_source == "predicted":
            S_hat, tau_used = extract_one_step_mr(predictor, mr, ex.y, ex.e, Y, E)
        elif tau_source == "forced_zero":
            S_hat, tau_used = extract_one_step_mr(predictor, None, ex.y, ex.e, Y, E, tau=0.0)
        elif tau_source == "forced_true":
            S_hat, tau_used = extract_one_step_mr(predictor, None, ex.y, ex.e, Y, E, tau=ex.tau_star)
        else:
            raise ValidationError(f"unknown tau_source {tau_source!r}")
        row = evaluate_example(S_hat, ex, stft_cfg)
        row["tau_used"] = tau_used
        row["tau_star"] = ex.tau_star
        report.rows.append(row)
    return report


def mr_sensitivity_report(models: dict, examples, stft_cfg: StftConfig, mr=None,
                          sources=("predicted", "forced_zero", "forced_true")) -> list[dict]:
    """Ablation table rows: for each model a ``w/o`` and a ``w/`` MR row plus declines.

    ``models`` maps a :class:`PathKind` (or its value) to a predictor. The
    mixture-to-target model has no coordinate to predict, so both of its rows
    use the native mixture start and its decline is zero. For the
    background-to-target model ``w/o`` starts at tau = 0 and ``w/`` uses the
    estimator when given, otherwise the true tau.
    """
    if not models:
        raise ValidationError("no models given")
    rows = []
    for key, predictor in models.items():
        if predictor is None:
            raise ValidationError(f"missing model for {key}")
        kind = PathKind(key)
        if kind is PathKind.MIXTURE_TO_TARGET:
            native = evaluate(predictor, examples, stft_cfg, kind, "native").aggregate()
            with_row, without_row = native, native
            with_src = without_src = "native"
        else:
            with_src = "predicted" if (mr is not None and "predicted" in sources) else "forced_true"
            with_row = evaluate(predictor, examples, stft_cfg, kind, with_src, mr=mr).aggregate()
            without_src = "forced_zero"
            without_row = evaluate(predictor, examples, stft_cfg, kind, without_src).aggregate()
        decline = {
            "delta_si_sdr_db": without_row["si_sdr"] - with_row["si_sdr"],
            "delta_spk_sim_pct": _pct(without_row["spk_sim"], with_row["spk_sim"]),
            "delta_spectral_mse_pct": _pct(without_row["spectral_mse"], with_row["spectral_mse"]),
        }
        for label, agg, src in (("w/o", without_row, without_src), ("w/", with_row, with_src)):
            rows.append({
                "method": kind.value, "mr_pred": label, "tau_source": src,
                "si_sdr": agg["si_sdr"], "si_sdr_improvement": agg["si_sdr_improvement"],
                "spk_sim": agg["spk_sim"], "spectral_mse": agg["spectral_mse"], "count": agg["count"],
                **decline,
            })
    return rows


def _pct(new, ref):
    return 100.0 * (new - ref) / abs(ref) if ref else 0.0


def format_table(rows: list[dict]) -> str:
    """Fixed-width text rendering of :func:`mr_sensitivity_report` rows."""
    head = f"{'method':<22}{'MR pred.':>9}{'SI-SDR':>9}{'SI-SDRi':>9}{'SpkSim':>8}{'SpecMSE':>10}" \
           f"{'dSI-SDR(dB)':>13}{'dSpkSim(%)':>12}{'dSpecMSE(%)':>13}"
    lines = [head, "-" * len(head)]
    for row in rows:
        lines.append(
            f"{row['method']:<22}{row['mr_pred']:>9}{row['si_sdr']:>9.2f}{row['si_sdr_improvement']:>9.2f}"
            f"{row['spk_sim']:>8.3f}{row['spectral_mse']:>10.4f}{row['delta_si_sdr_db']:>13.2f}"
            f"{row['delta_spk_sim_pct']:>12.1f}{row['delta_spectral_mse_pct']:>13.1f}"
        )
    return "\n".join(lines)


def write_rows_csv(path, rows: list[dict]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def tau_sweep(predictor, examples, stft_cfg: StftConfig, offsets=np.linspace(-0.3, 0.3, 13)) -> list[dict]:
    """Mean SI-SDR when the jump starts at ``clip(tau_star + offset, 0, 1)``.

    Rows are plot-ready ``(x, y, series)`` records.
    """
    predictor = as_predictor(predictor)
    rows = []
    for off in offsets:
        vals = []
        for ex in examples:
            Y, E = stft(ex.y, stft_cfg), stft(ex.e, stft_cfg)
            tau = float(np.clip(ex.tau_star + off, 0.0, 1.0))
            S_hat, _ = extract_one_step_mr(predictor, None, ex.y, ex.e, Y, E, tau=tau)
            vals.append(si_sdr(istft(S_hat, stft_cfg, len(ex.y)), ex.s))
        rows.append({"x": float(off), "y": float(np.mean(vals)), "series": "si_sdr_vs_tau_offset"})
    return rows
