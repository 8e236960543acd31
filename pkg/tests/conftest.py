import os
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from onestep_tse.config import load_config
from onestep_tse.frontend import DESK_STFT
from onestep_tse.pipeline import DeskRun
from onestep_tse.predictor import MeanVelocityNet, PredictorConfig
from onestep_tse.synth_data import SynthConfig, generate_dataset
from onestep_tse.trajectory import PathKind

settings.register_profile("repo", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

torch.set_num_threads(1)

TINY = PredictorConfig(channels=64, n_blocks=2, n_heads=2, width=16, time_embed_dim=8, mlp_ratio=2)


def tiny_model(seed=0, dtype=torch.float64, randomize_head=True):
    """Small float64 network; optionally with non-zero output heads."""
    torch.manual_seed(seed)
    model = MeanVelocityNet(TINY).to(dtype)
    if randomize_head:
        with torch.no_grad():
            for p in model.parameters():
                if p.abs().sum() == 0:
                    p.normal_(0, 0.05)
    return model


@pytest.fixture(scope="session")
def small_data():
    cfg = SynthConfig(f0_low=600.0, f0_high=2000.0, n_train=48, n_val=16, n_test=16)
    return cfg, generate_dataset(cfg, 7)


# desk-scale trained artifacts, reused across runs while config and source are unchanged
CACHE = Path(os.environ.get("ONESTEP_TSE_CACHE", Path(__file__).resolve().parents[1] / ".cache" / "acceptance"))


@pytest.fixture(scope="session")
def desk_run():
    return DeskRun(load_config(preset="desk"), CACHE)


@pytest.fixture(scope="session")
def mt_model(desk_run):
    return desk_run.model(PathKind.MIXTURE_TO_TARGET)


@pytest.fixture(scope="session")
def bg_model(desk_run):
    return desk_run.model(PathKind.BACKGROUND_TO_TARGET)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk():
    return DESK_STFT


# acceptance summary -------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str):
    """Store and print one acceptance line; the summary repeats them at the end of the run."""
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}")
