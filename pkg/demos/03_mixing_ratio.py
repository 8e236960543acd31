"""
Estimating where the mixture sits on the path
=============================================

The background-to-target path passes through the mixture at t = tau_star.
A small regressor recovers that coordinate from the mixture and the
enrollment utterance.
"""

import numpy as np

from onestep_tse.synth_data import SynthConfig, generate_dataset
from onestep_tse.training import MRTrainConfig, mr_features, mr_mae, train_mr

data = generate_dataset(SynthConfig(n_train=400, n_val=100, n_test=100), seed=2)
cfg = MRTrainConfig(epochs=10)
model, report = train_mr(cfg, data["train"], data["val"])
print(f"validation MAE before training {report['initial_val_mae']:.4f}, best {report['val_mae']:.4f} "
      f"(epoch {report['best_epoch']})")

mix, enr, tau = mr_features(data["test"], cfg.model)
print(f"test MAE {mr_mae(model, mix, enr, tau):.4f}; guessing the mean gives {np.mean(np.abs(tau - tau.mean())):.4f}")
