"""Training loops for the mean-velocity network and the mixing-ratio regressor."""

from __future__ import annotations

import copy
import json
import logging
import math
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import checkpoint as ckpt
from .errors import NonFiniteLossError, ValidationError
from .frontend import StftConfig, stft
from .objective import LossBreakdown, ObjectiveConfig, SpectralBatch, batch_losses
from .predictor import MeanVelocityNet, MRConfig, MRRegressor, PredictorConfig, log_power, mask_features
from .schedules import AlphaSchedule, Branch, TimeSamplerConfig, alpha_at, draw
from .trajectory import PathKind

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    lr_init: float = 2e-5
    warmup_steps: int = 1000
    clip_norm: float = 0.5
    batch_size: int = 42
    grad_accum_steps: int = 2
    seed: int = 0
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    dtype: str = "float64"
    checkpoint_every: int = 0
    objective: ObjectiveConfig = ObjectiveConfig()
    schedule: AlphaSchedule = AlphaSchedule()
    sampler: TimeSamplerConfig = TimeSamplerConfig()
    path_kind: PathKind = PathKind.MIXTURE_TO_TARGET

    def __post_init__(self):
        for name in ("epochs", "batch_size", "grad_accum_steps"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.warmup_steps < 0:
            raise ValidationError("warmup_steps must be non-negative")
        if self.clip_norm <= 0 or self.lr_init <= 0:
            raise ValidationError("clip_norm and lr_init must be positive")
        if self.dtype not in DTYPES:
            raise ValidationError(f"dtype must be one of {sorted(DTYPES)}")
        object.__setattr__(self, "path_kind", PathKind(self.path_kind))

    @property
    def examples_per_step(self) -> int:
        return self.batch_size * self.grad_accum_steps


def steps_per_epoch(cfg: TrainConfig, n_examples: int) -> int:
    n = n_examples // cfg.examples_per_step
    if n < 1:
        raise ValidationError(f"{n_examples} examples cannot fill one step of {cfg.examples_per_step}")
    return n


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup to ``lr_init`` over ``warmup_steps``, then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValidationError("step must be non-negative")
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr_init * step / cfg.warmup_steps
    span = max(total_steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return 0.5 * cfg.lr_init * (1.0 + math.cos(math.pi * progress))


def clip_gradients(params, max_norm: float) -> tuple[float, float]:
    """Scale gradients in place so their global norm is at most ``max_norm``.

    Returns (norm before, norm after).
    """
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0, 0.0
    norm = float(torch.sqrt(sum((g.detach().double() ** 2).sum() for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
        return norm, norm * scale
    return norm, norm


def spectral_batch(examples, stft_cfg: StftConfig) -> SpectralBatch:
    """Stack the STFTs of a list of :class:`MixtureExample`."""
    Y = np.stack([stft(ex.y, stft_cfg) for ex in examples])
    S = np.stack([stft(ex.s, stft_cfg) for ex in examples])
    B = np.stack([stft(ex.b, stft_cfg) for ex in examples])
    E = np.stack([stft(ex.e, stft_cfg) for ex in examples])
    tau = np.array([ex.tau_star for ex in examples])
    return SpectralBatch(Y, S, B, E, tau)


@dataclass
class StepReport:
    step: int
    alpha: float
    lr: float
    loss: float
    grad_norm: float
    clipped_norm: float
    breakdowns: list = field(default_factory=list)
    skipped: bool = False

    def records(self):
        """Telemetry rows, one per branch present in the step."""
        return [
            {"step": self.step, "branch": b.branch, "alpha": self.alpha, "raw_mse": b.raw_mse,
             "weighted": b.weighted, "total": b.total, "count": b.count}
            for b in self.breakdowns
        ]


@dataclass
class RunManifest:
    config: dict
    seed: int
    code_version: str
    epochs: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def write(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(asdict(self), indent=2, default=str))

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


class TrainState:
    """Model, optimizer and step counter; all randomness is derived from (seed, step)."""

    def __init__(self, cfg: TrainConfig, model: MeanVelocityNet, steps_per_epoch: int, total_steps: int):
        self.cfg = cfg
        self.model = model
        self.steps_per_epoch = steps_per_epoch
        self.total_steps = total_steps
        self.step = 0
        self.skipped = 0
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.lr_init, betas=tuple(cfg.betas), eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay, foreach=False,
        )

    @property
    def epoch(self) -> float:
        return self.step / self.steps_per_epoch

    def alpha(self) -> float:
        return alpha_at(self.cfg.schedule, self.epoch)

    # checkpoint plumbing -------------------------------------------------

    def tensors(self):
        out = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        names = dict((id(p), n) for n, p in self.model.named_parameters())
        for p, st in self.optimizer.state.items():
            name = names[id(p)]
            out[f"optim.{name}.exp_avg"] = st["exp_avg"]
            out[f"optim.{name}.exp_avg_sq"] = st["exp_avg_sq"]
            out[f"optim.{name}.step"] = torch.as_tensor(st["step"], dtype=torch.float64).reshape(())
        return out

    def meta(self):
        return {
            "kind": "mean_velocity",
            "predictor": asdict(self.model.cfg),
            "train": config_dict(self.cfg),
            "step": self.step,
            "skipped": self.skipped,
            "dtype": self.cfg.dtype,
        }

    def save(self, path) -> str:
        return ckpt.save(path, self.tensors(), self.meta())

    def restore(self, tensors, meta):
        model_sd = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
        self.model.load_state_dict(model_sd)
        for name, p in self.model.named_parameters():
            key = f"optim.{name}"
            if f"{key}.exp_avg" in tensors:
                self.optimizer.state[p] = {
                    "step": tensors[f"{key}.step"].to(torch.float32).clone(),
                    "exp_avg": tensors[f"{key}.exp_avg"].to(p.dtype).clone(),
                    "exp_avg_sq": tensors[f"{key}.exp_avg_sq"].to(p.dtype).clone(),
                }
        self.step = int(meta["step"])
        self.skipped = int(meta.get("skipped", 0))


def config_dict(cfg) -> dict:
    def convert(x):
        if hasattr(x, "value") and isinstance(x, PathKind):
            return x.value
        if isinstance(x, dict):
            return {k: convert(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [convert(v) for v in x]
        return x

    return convert(asdict(cfg))


def build_model(pcfg: PredictorConfig, dtype: str, seed: int) -> MeanVelocityNet:
    torch.manual_seed(seed)
    return MeanVelocityNet(pcfg).to(DTYPES[dtype])


def _micro_batches(batch: SpectralBatch, cfg: TrainConfig):
    if len(batch) == 0:
        raise ValidationError("empty batch")
    n = len(batch)
    size = math.ceil(n / cfg.grad_accum_steps)
    return [batch[i : i + size] for i in range(0, n, size)]


def apply_update(state: TrainState, lr: float) -> tuple[float, float]:
    """Clip the accumulated gradients and take one AdamW step at ``lr``."""
    norm, clipped = clip_gradients(list(state.model.parameters()), state.cfg.clip_norm)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    return norm, clipped


def train_step(state: TrainState, batch: SpectralBatch) -> StepReport:
    """One optimizer update over ``batch`` (split into ``grad_accum_steps`` micro-batches).

    Every example draws its own branch and interval. A non-finite loss rejects
    the update, bumps ``state.skipped`` and still advances the step counter.
    """
    cfg = state.cfg
    alpha = state.alpha()
    rng = np.random.default_rng([cfg.seed, 1, state.step])
    lr = lr_at(cfg, state.step + 1, state.total_steps)
    state.optimizer.zero_grad(set_to_none=True)
    n_total = len(batch)
    per_branch = {Branch.FM: [], Branch.MF: []}
    loss_sum = 0.0
    try:
        for mb in _micro_batches(batch, cfg):
            draws = [draw(cfg.sampler, cfg.objective.rho, alpha, rng) for _ in range(len(mb))]
            t = np.array([d.t for d in draws])
            r = np.array([d.r for d in draws])
            is_fm = np.array([d.branch is Branch.FM for d in draws])
            out = batch_losses(state.model, mb, t, r, is_fm, alpha, cfg.objective, cfg.path_kind)
            if not torch.isfinite(out["total"]).all():
                bad = int(np.flatnonzero(~torch.isfinite(out["total"]).numpy())[0])
                raise NonFiniteLossError("total", {"alpha": alpha, "t": t[bad], "r": r[bad], "branch": draws[bad].branch.value})
            (out["total"].sum() / n_total).backward()
            loss_sum += float(out["total"].detach().sum())
            for key, mask in ((Branch.FM, is_fm), (Branch.MF, ~is_fm)):
                if mask.any():
                    idx = torch.as_tensor(np.flatnonzero(mask))
                    per_branch[key].append({k: out[k].detach()[idx] for k in ("raw", "weighted", "total")})
    except NonFiniteLossError as err:
        log.warning("step %d rejected: %s", state.step, err)
        state.optimizer.zero_grad(set_to_none=True)
        state.skipped += 1
        state.step += 1
        return StepReport(state.step - 1, alpha, lr, float("nan"), float("nan"), float("nan"), skipped=True)

    norm, clipped = apply_update(state, lr)

    breakdowns = []
    for key, parts in per_branch.items():
        if parts:
            cat = {k: torch.cat([p[k] for p in parts]) for k in ("raw", "weighted", "total")}
            breakdowns.append(
                LossBreakdown(key.value, float(cat["raw"].mean()), float(cat["weighted"].mean()),
                              float(cat["total"].mean()), alpha if key is Branch.MF else None, int(cat["raw"].numel()))
            )
    report = StepReport(state.step, alpha, lr, loss_sum / n_total, norm, clipped, breakdowns)
    state.step += 1
    return report


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


def train(cfg: TrainConfig, data: SpectralBatch, model_cfg: PredictorConfig = PredictorConfig(),
          out_dir=None, resume=None, stop_after_epoch=None, telemetry=None, on_epoch=None):
    """Run the training loop; returns (model, manifest, step reports).

    ``resume`` is a checkpoint path written by an earlier run of the same
    config; ``stop_after_epoch`` interrupts the loop (for staged runs).
    ``telemetry`` is an open text file receiving one JSON record per branch
    per step. ``on_epoch(epoch, state)`` may return a dict of extra metrics.
    """
    if len(data) == 0:
        raise ValidationError("empty dataset")
    if data.Y.shape[1] != model_cfg.channels:
        raise ValidationError(f"data has {data.Y.shape[1]} channels, model expects {model_cfg.channels}")
    spe = steps_per_epoch(cfg, len(data))
    total = spe * cfg.epochs
    model = build_model(model_cfg, cfg.dtype, cfg.seed)
    state = TrainState(cfg, model, spe, total)
    manifest = RunManifest(config=config_dict(cfg), seed=cfg.seed, code_version=code_version())
    if resume is not None:
        tensors, meta = ckpt.load(resume)
        state.restore(tensors, meta)
        prev = Path(resume).with_suffix(".manifest.json")
        if prev.exists():
            old = RunManifest.read(prev)
            manifest.epochs, manifest.checkpoints = old.epochs, old.checkpoints
        log.info("resumed from %s at step %d", resume, state.step)

    out_dir = Path(out_dir) if out_dir is not None else None
    reports = []
    while state.step < total:
        epoch = state.step // spe
        order = _epoch_order(cfg.seed, epoch, len(data))
        within = state.step - epoch * spe
        for i in range(within, spe):
            idx = torch.as_tensor(order[i * cfg.examples_per_step : (i + 1) * cfg.examples_per_step])
            rep = train_step(state, data[idx])
            reports.append(rep)
            if telemetry is not None:
                for rec in rep.records():
                    telemetry.write(json.dumps(rec) + "\n")
        done = epoch + 1
        ep_reports = [r for r in reports if not r.skipped and r.step >= epoch * spe]
        metrics = {
            "epoch": done,
            "step": state.step,
            "loss": float(np.mean([r.loss for r in ep_reports])) if ep_reports else float("nan"),
            "alpha": state.alpha(),
            "skipped": state.skipped,
        }
        if on_epoch is not None:
            metrics.update(on_epoch(done, state) or {})
        manifest.epochs.append(metrics)
        log.info("epoch %d: %s", done, metrics)
        last = state.step >= total
        if out_dir is not None and (last or (cfg.checkpoint_every and done % cfg.checkpoint_every == 0)):
            path = out_dir / ("final.ckpt" if last else f"epoch{done:04d}.ckpt")
            digest = state.save(path)
            manifest.checkpoints.append({"path": path.name, "sha256": digest, "epoch": done, "step": state.step})
            manifest.write(path.with_suffix(".manifest.json"))
        if stop_after_epoch is not None and done >= stop_after_epoch:
            break
    if out_dir is not None:
        manifest.write(out_dir / "manifest.json")
    return model, manifest, reports


def load_model(path) -> tuple[MeanVelocityNet, dict]:
    """Rebuild a mean-velocity network from a training checkpoint."""
    tensors, meta = ckpt.load(path)
    if meta.get("kind") != "mean_velocity":
        raise ValidationError(f"{path} is not a mean-velocity checkpoint")
    model = MeanVelocityNet(PredictorConfig(**meta["predictor"])).to(DTYPES[meta.get("dtype", "float64")])
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    model.eval()
    return model, meta


def save_model(path, model: MeanVelocityNet, meta=None) -> str:
    """Weights-only checkpoint (no optimizer state)."""
    dtype = "float32" if param_dtype_name(model) == "float32" else "float64"
    base = {"kind": "mean_velocity", "predictor": asdict(model.cfg), "step": 0, "dtype": dtype}
    base.update(meta or {})
    return ckpt.save(path, {f"model.{k}": v for k, v in model.state_dict().items()}, base)


def param_dtype_name(model) -> str:
    return str(next(model.parameters()).dtype).replace("torch.", "")


# ---------------------------------------------------------------------------
# mixing-ratio regressor


@dataclass(frozen=True)
class MRTrainConfig:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0
    dtype: str = "float32"
    model: MRConfig = MRConfig()


def mr_features(examples, model_cfg: MRConfig = MRConfig()):
    """Log-power arrays at the regressor's own analysis resolution, plus labels."""
    stft_cfg = model_cfg.stft
    mix = np.stack([log_power(stft(ex.y, stft_cfg)) for ex in examples])
    enr = np.stack([log_power(stft(ex.e, stft_cfg)) for ex in examples])
    tau = np.array([np.nan if ex.tau_star is None else ex.tau_star for ex in examples], dtype=np.float64)
    return mix, enr, tau


def mr_loss(model: MRRegressor, mix, enr, tau) -> torch.Tensor:
    """Mean squared error between sigmoid(logit) and the true ratio."""
    return ((torch.sigmoid(model(mix, enr)) - tau) ** 2).mean()


def train_mr_arrays(cfg: MRTrainConfig, train_arrays, val_arrays=None):
    """Fit the regressor on precomputed (mix_feats, enroll_feats, tau) arrays.

    The skip read-out starts from its closed-form fit. With validation data
    the weights of the best validation epoch are kept.
    Returns (model, report) with per-epoch train MSE and validation MAE.
    """
    mix, enr, tau = train_arrays
    tau = np.asarray(tau, dtype=np.float64)
    if tau.size == 0:
        raise ValidationError("empty MR training set")
    if not np.all(np.isfinite(tau)):
        raise ValidationError("every MR training example needs a tau_star label")
    dtype = DTYPES[cfg.dtype]
    torch.manual_seed(cfg.seed)
    model = MRRegressor(cfg.model).to(dtype)
    mix_t = torch.as_tensor(mix, dtype=dtype)
    enr_t = torch.as_tensor(enr, dtype=dtype)
    tau_t = torch.as_tensor(tau, dtype=dtype)
    model.fit_readout(mix_t, enr_t, tau)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, foreach=False)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(tau)
    n_steps = cfg.epochs * math.ceil(n / cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(n_steps, 1))
    report = {"epochs": []}
    best = None
    if val_arrays is not None:
        model.eval()
        best = (mr_mae(model, *val_arrays), 0, copy.deepcopy(model.state_dict()))
        report["initial_val_mae"] = best[0]
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 3, epoch]).permutation(n)
        losses = []
        model.train()
        for i in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(order[i : i + cfg.batch_size])
            m = mix_t[idx]
            if cfg.model.mask_augment:
                m = mask_features(m, cfg.model, gen)
            loss = mr_loss(model, m, enr_t[idx], tau_t[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            losses.append(float(loss.detach()))
        rec = {"epoch": epoch + 1, "train_mse": float(np.mean(losses))}
        if val_arrays is not None:
            model.eval()
            rec["val_mae"] = mr_mae(model, *val_arrays)
            if rec["val_mae"] < best[0]:
                best = (rec["val_mae"], epoch + 1, copy.deepcopy(model.state_dict()))
        report["epochs"].append(rec)
        log.info("mr epoch %d: %s", epoch + 1, rec)
    model.eval()
    if best is not None:
        model.load_state_dict(best[2])
        report["val_mae"], report["best_epoch"] = best[0], best[1]
    return model, report


def mr_mae(model: MRRegressor, mix, enr, tau) -> float:
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        pred = torch.sigmoid(model(torch.as_tensor(mix, dtype=dtype), torch.as_tensor(enr, dtype=dtype)))
    return float(np.mean(np.abs(pred.double().numpy() - np.asarray(tau))))


def train_mr(cfg: MRTrainConfig, train_examples, val_examples=None):
    """Train the regressor on examples carrying ``tau_star`` labels."""
    if any(ex.tau_star is None for ex in train_examples):
        raise ValidationError("every MR training example needs a tau_star label")
    train_arrays = mr_features(train_examples, cfg.model)
    val_arrays = mr_features(val_examples, cfg.model) if val_examples else None
    return train_mr_arrays(cfg, train_arrays, val_arrays)


def save_mr(path, model: MRRegressor, meta=None) -> str:
    base = {"kind": "mr", "mr": asdict(model.cfg), "dtype": param_dtype_name(model)}
    base.update(meta or {})
    return ckpt.save(path, model.state_dict(), base)


def load_mr(path) -> MRRegressor:
    tensors, meta = ckpt.load(path)
    if meta.get("kind") != "mr":
        raise ValidationError(f"{path} is not an MR checkpoint")
    model = MRRegressor(MRConfig(**meta["mr"])).to(DTYPES[meta.get("dtype", "float32")])
    model.load_state_dict(tensors)
    model.eval()
    return model
