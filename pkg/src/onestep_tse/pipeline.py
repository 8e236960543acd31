"""Train-once helpers: dataset, both path-kind models and the MR regressor for one config.

Artifacts land in a directory keyed by a digest of the config and the
package source, so an unchanged setup reuses its checkpoints and any code or
config change retrains from scratch.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path

from .config import RepoConfig
from .synth_data import generate_dataset
from .training import load_model, load_mr, save_mr, spectral_batch, train, train_mr
from .trajectory import PathKind

log = logging.getLogger(__name__)


def source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def run_key(cfg: RepoConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob + source_digest().encode()).hexdigest()[:16]


class DeskRun:
    """Lazily materialised artifacts under ``root/<run_key>``."""

    def __init__(self, cfg: RepoConfig, root):
        self.cfg = cfg
        self.dir = Path(root) / run_key(cfg)
        self.timings: dict[str, float] = {}
        self._data = None

    @property
    def data(self):
        # regenerated from the seed each time: cheap and bit-identical
        if self._data is None:
            self._data = generate_dataset(self.cfg.synth, self.cfg.seed)
        return self._data

    def model(self, kind: PathKind = PathKind.MIXTURE_TO_TARGET):
        kind = PathKind(kind)
        out = self.dir / kind.value
        ckpt = out / "final.ckpt"
        if not ckpt.exists():
            tcfg = dataclasses.replace(self.cfg.train, path_kind=kind)
            batch = spectral_batch(self.data["train"], self.cfg.stft)
            out.mkdir(parents=True, exist_ok=True)
            start = time.perf_counter()
            with open(out / "telemetry.ndjson", "w") as tele:
                train(tcfg, batch, self.cfg.predictor, out_dir=out, telemetry=tele)
            self.timings[kind.value] = time.perf_counter() - start
            (out / "timing.json").write_text(json.dumps({"seconds": self.timings[kind.value]}))
        model, _ = load_model(ckpt)
        return model

    def train_seconds(self, kind: PathKind) -> float:
        """Wall time of the run that produced the checkpoint (cached or not)."""
        return json.loads((self.dir / PathKind(kind).value / "timing.json").read_text())["seconds"]

    def mr(self):
        path = self.dir / "mr" / "mr.ckpt"
        if not path.exists():
            model, report = train_mr(self.cfg.mr_train, self.data["train"], self.data["val"])
            save_mr(path, model, {"report": report})
        return load_mr(path)
