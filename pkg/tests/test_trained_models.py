"""Behaviour of the desk-scale trained models beyond the acceptance criteria."""

import numpy as np
import pytest

from onestep_tse import metrics
from onestep_tse.frontend import stft
from onestep_tse.inference import InferenceConfig, extract_one_step, extract_utterance
from onestep_tse.trajectory import PathKind

BG = PathKind.BACKGROUND_TO_TARGET


def test_chunking_costs_under_one_db(desk_run, mt_model):
    cfg = desk_run.cfg
    test = desk_run.data["test"]
    whole, chunked = [], []
    for ex in test:
        for frames, out in ((0, whole), (48, chunked)):
            est = extract_utterance(mt_model, ex.y, ex.e, InferenceConfig(chunk_frames=frames, stft=cfg.stft))
            out.append(metrics.si_sdr(est, ex.s))
    gap = np.mean(whole) - np.mean(chunked)
    print(f"unchunked {np.mean(whole):.2f} dB, 48-frame chunks {np.mean(chunked):.2f} dB")
    assert not np.allclose(whole, chunked)  # context really changed
    assert abs(gap) < 1.0


def test_tau_sweep_peaks_near_true_ratio(desk_run, bg_model):
    offsets = np.round(np.linspace(-0.3, 0.3, 13), 2)
    rows = metrics.tau_sweep(bg_model, desk_run.data["test"], desk_run.cfg.stft, offsets)
    curve = {r["x"]: r["y"] for r in rows}
    print("  ".join(f"{x:+.2f}:{y:.2f}" for x, y in curve.items()))
    best = max(curve, key=curve.get)
    assert abs(best) <= 0.1
    assert curve[best] > curve[-0.3] and curve[best] > curve[0.3]
    # past the true ratio the jump is too short and quality falls steadily
    right = [curve[x] for x in sorted(curve) if x >= max(best, 0.0)]
    assert all(a >= b for a, b in zip(right, right[1:]))


@pytest.mark.xfail(reason="measured 77% on the desk model (63-75% at 8-32 epochs); the mean gap is ~2 dB but a "
                          "model forced to tau = 0 still lands near (1 + tau) S - tau B on many examples")
def test_true_ratio_beats_zero_per_example(desk_run, bg_model):
    cfg = desk_run.cfg
    test = desk_run.data["test"]
    zero = metrics.evaluate(bg_model, test, cfg.stft, BG, "forced_zero").rows
    true = metrics.evaluate(bg_model, test, cfg.stft, BG, "forced_true").rows
    wins = np.mean([t["si_sdr"] >= z["si_sdr"] for z, t in zip(zero, true)])
    print(f"forced tau* >= forced 0 on {wins:.1%} of {len(test)} examples")
    assert wins >= 0.9


def test_enrollment_changes_the_output(desk_run, mt_model):
    cfg = desk_run.cfg
    test = desk_run.data["test"]
    ex = test[0]
    other = next(o for o in test if o.target_speaker != ex.target_speaker)
    Y = stft(ex.y, cfg.stft)
    own = extract_one_step(mt_model, Y, stft(ex.e, cfg.stft))
    swapped = extract_one_step(mt_model, Y, stft(other.e, cfg.stft))
    assert np.linalg.norm(own - swapped) > 1e-3 * np.linalg.norm(own)
