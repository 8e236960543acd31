"""
The training objective and its schedules
========================================

Shows how each training example gets its branch, its (t, r) pair and its
teacher mixing weight alpha, then evaluates the combined loss on a tiny
network and takes a few optimiser steps.
"""

import numpy as np
import torch

from onestep_tse.frontend import DESK_STFT
from onestep_tse.objective import ObjectiveConfig, batch_losses
from onestep_tse.predictor import MeanVelocityNet, PredictorConfig
from onestep_tse.schedules import AlphaSchedule, TimeSamplerConfig, alpha_at, draw
from onestep_tse.synth_data import SynthConfig, generate_dataset
from onestep_tse.training import TrainConfig, spectral_batch, train

# alpha starts near 1 (pure flow matching) and anneals toward 0.1.
schedule = AlphaSchedule()
print("alpha by epoch:", {e: round(alpha_at(schedule, e), 3) for e in (0, 25, 50, 75, 100, 150)})

# Each draw picks the branch first, then times for that branch.
rng = np.random.default_rng(0)
for _ in range(4):
    print(draw(TimeSamplerConfig(), rho=0.5, alpha=0.4, rng=rng))

# A tiny network and one batch of spectra.
data = generate_dataset(SynthConfig(n_train=32, n_val=4, n_test=4), seed=1)
batch = spectral_batch(data["train"], DESK_STFT)
torch.manual_seed(0)
net_cfg = PredictorConfig(channels=64, n_blocks=2, n_heads=2, width=32, time_embed_dim=16)
model = MeanVelocityNet(net_cfg).double()
draws = [draw(TimeSamplerConfig(), 0.5, 0.4, rng) for _ in range(len(batch))]
out = batch_losses(model, batch, [d.t for d in draws], [d.r for d in draws],
                   [d.branch.value == "fm" for d in draws], 0.4, ObjectiveConfig())
print(f"loss on a fresh model: {float(out['loss'].detach()):.4f}")

# The full loop: warmup + cosine learning rate, clipping, alpha annealing.
cfg = TrainConfig(epochs=4, lr_init=2e-3, warmup_steps=2, batch_size=8, dtype="float64",
                  schedule=AlphaSchedule(start_epoch=0.5, end_epoch=3.0))
_, _, reports = train(cfg, batch, net_cfg)
for rep in reports:
    print(f"step {rep.step:3d}  lr {rep.lr:.2e}  alpha {rep.alpha:.3f}  loss {rep.loss:.4f}")
