"""Command-line entry points.

    onestep-tse gen-data  --config C --seed N --out DIR
    onestep-tse train     --config C --data DIR --out DIR [--path-kind K] [--resume CKPT]
    onestep-tse train-mr  --config C --data DIR --out DIR
    onestep-tse extract   --checkpoint CKPT --mixture WAV --enroll WAV --out WAV
                          [--mr | --no-mr] [--mr-checkpoint CKPT] [--tau X] [--chunk-frames N]
                          [--dump-spectrograms DIR]
    onestep-tse eval      --checkpoint CKPT --data DIR --out DIR [--mode standard|ablation|sweep]
                          [--bg-checkpoint CKPT] [--mr-checkpoint CKPT] [--tau-source S]

Every command accepts ``--set key.path=value`` overrides (YAML values) on top
of the config file and writes a ``<command>.manifest.json`` with the resolved
config, seed and code version next to its outputs. Failures print one JSON
line ``{"error": ..., "message": ...}`` to stderr; exit status is 2 for
invalid input and 1 for anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import metrics
from .config import ENV_VAR, RepoConfig, dump_config, from_dict, load_config, merge
from .errors import ValidationError
from .frontend import read_wav, stft, write_spectrogram, write_wav
from .inference import InferenceConfig, extract_utterance
from .synth_data import generate_dataset, load_dataset
from .trajectory import PathKind
from .training import (code_version, load_model, load_mr, save_mr, spectral_batch, train, train_mr)

log = logging.getLogger("onestep_tse")


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValidationError(f"--set expects key.path=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def resolve_config(args) -> RepoConfig:
    cfg = load_config(args.config, getattr(args, "preset", None))
    extra = _overrides(getattr(args, "set", None))
    if extra:
        cfg = from_dict(merge(cfg.to_dict(), extra))
    return cfg


def _manifest(out_dir, command: str, cfg: RepoConfig, args, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "seed": cfg.seed,
        "code_version": code_version(),
        "config": cfg.to_dict(),
    }
    record.update(extra or {})
    (out_dir / f"{command}.manifest.json").write_text(json.dumps(record, indent=2, default=str))


def _data_manifest(path) -> Path:
    path = Path(path)
    path = path / "manifest.jsonl" if path.is_dir() else path
    if not path.exists():
        raise ValidationError(f"dataset manifest not found: {path}")
    return path


# commands ------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = resolve_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out or cfg.paths.data_dir)
    data = generate_dataset(cfg.synth, seed, out)
    _manifest(out, "gen-data", cfg, args, {"seed": seed, "counts": {k: len(v) for k, v in data.items()}})
    print(json.dumps({"out": str(out), **{k: len(v) for k, v in data.items()}}))


def cmd_train(args):
    cfg = resolve_config(args)
    flags = {"path_kind": args.path_kind, "epochs": args.epochs}
    flags = {k: v for k, v in flags.items() if v is not None}
    if flags:
        cfg = from_dict(merge(cfg.to_dict(), {"train": flags}))
    train_cfg = cfg.train
    examples = load_dataset(_data_manifest(args.data), ("train",))["train"]
    batch = spectral_batch(examples, cfg.stft)
    out = Path(args.out or Path(cfg.paths.run_dir) / train_cfg.path_kind.value)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "telemetry.ndjson", "a" if args.resume else "w") as tele:
        _, manifest, _ = train(train_cfg, batch, cfg.predictor, out_dir=out, resume=args.resume, telemetry=tele)
    _manifest(out, "train", cfg, args, {"path_kind": train_cfg.path_kind.value})
    print(json.dumps({"checkpoint": str(out / "final.ckpt"), "epochs": len(manifest.epochs),
                      "final_loss": manifest.epochs[-1]["loss"] if manifest.epochs else None}))


def cmd_train_mr(args):
    cfg = resolve_config(args)
    data = load_dataset(_data_manifest(args.data), ("train", "val"))
    model, report = train_mr(cfg.mr_train, data["train"], data["val"] or None)
    out = Path(args.out or Path(cfg.paths.run_dir) / "mr")
    digest = save_mr(out / "mr.ckpt", model, {"report": report})
    _manifest(out, "train-mr", cfg, args, {"sha256": digest, "val_mae": report.get("val_mae")})
    print(json.dumps({"checkpoint": str(out / "mr.ckpt"), "val_mae": report.get("val_mae")}))


def cmd_extract(args):
    cfg = resolve_config(args)
    model, meta = load_model(args.checkpoint)
    y, e = read_wav(args.mixture), read_wav(args.enroll)
    if y.sample_rate != e.sample_rate:
        raise ValidationError(f"sample rates differ: mixture {y.sample_rate} Hz, enrollment {e.sample_rate} Hz")
    use_mr = args.mr or args.tau is not None
    mr = None
    if use_mr and args.tau is None:
        if not args.mr_checkpoint:
            raise ValidationError("--mr needs --mr-checkpoint (or force a value with --tau)")
        mr = load_mr(args.mr_checkpoint)
    chunk = cfg.inference.chunk_frames if args.chunk_frames is None else args.chunk_frames
    icfg = InferenceConfig(chunk_frames=chunk, use_mr=use_mr, stft=cfg.stft, tau=args.tau)
    if model.cfg.channels != cfg.stft.channels:
        raise ValidationError(f"checkpoint expects {model.cfg.channels} channels, config STFT gives {cfg.stft.channels}")
    s_hat = extract_utterance(model, y, e, icfg, mr=mr)
    write_wav(args.out, s_hat)
    if args.dump_spectrograms:
        dump = Path(args.dump_spectrograms)
        dump.mkdir(parents=True, exist_ok=True)
        write_spectrogram(dump / "mixture.spg", stft(y, cfg.stft))
        write_spectrogram(dump / "enroll.spg", stft(e, cfg.stft))
        write_spectrogram(dump / "estimate.spg", stft(s_hat, cfg.stft))
    _manifest(Path(args.out).parent, "extract", cfg, args, {"path_kind": meta.get("train", {}).get("path_kind")})
    print(json.dumps({"out": str(args.out), "samples": len(s_hat), "sample_rate": s_hat.sample_rate}))


def _path_kind(meta) -> PathKind:
    return PathKind(meta.get("train", {}).get("path_kind", PathKind.MIXTURE_TO_TARGET.value))


def cmd_eval(args):
    cfg = resolve_config(args)
    split = args.split or cfg.eval.split
    examples = load_dataset(_data_manifest(args.data), (split,))[split]
    n = args.n_examples or cfg.eval.n_examples
    examples = examples[:n]
    if not examples:
        raise ValidationError(f"no examples in split {split!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mr = load_mr(args.mr_checkpoint) if args.mr_checkpoint else None
    summary = {"mode": args.mode, "split": split, "count": len(examples)}

    if args.mode == "standard":
        if args.oracle:
            predictor, kind = "oracle", PathKind.MIXTURE_TO_TARGET
        else:
            predictor, meta = load_model(_require(args.checkpoint, "--checkpoint"))
            kind = _path_kind(meta)
        source = args.tau_source or ("native" if kind is PathKind.MIXTURE_TO_TARGET else
                                     ("predicted" if mr is not None else "forced_true"))
        report = metrics.evaluate(predictor, examples, cfg.stft, kind, source, mr=mr)
        report.write_csv(out / "per_example.csv")
        summary.update(report.tags, **report.aggregate())
    elif args.mode == "ablation":
        models = {}
        if args.checkpoint:
            models[PathKind.MIXTURE_TO_TARGET.value] = load_model(args.checkpoint)[0]
        models[PathKind.BACKGROUND_TO_TARGET.value] = load_model(_require(args.bg_checkpoint, "--bg-checkpoint"))[0]
        rows = metrics.mr_sensitivity_report(models, examples, cfg.stft, mr=mr)
        table = metrics.format_table(rows)
        (out / "ablation.txt").write_text(table + "\n")
        metrics.write_rows_csv(out / "ablation.csv", rows)
        print(table)
        summary["rows"] = rows
    elif args.mode == "sweep":
        model = load_model(_require(args.bg_checkpoint or args.checkpoint, "--bg-checkpoint"))[0]
        rows = metrics.tau_sweep(model, examples, cfg.stft)
        metrics.write_rows_csv(out / "tau_sweep.csv", rows)
        summary["rows"] = rows
    else:
        raise ValidationError(f"unknown mode {args.mode!r}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    _manifest(out, "eval", cfg, args)
    print(json.dumps({k: v for k, v in summary.items() if k != "rows"}, default=str))


def _require(value, flag):
    if not value:
        raise ValidationError(f"{flag} is required for this mode")
    return value


def cmd_show_config(args):
    print(dump_config(resolve_config(args)), end="")


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="onestep-tse", description="One-step target speaker extraction toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, default=None, help=f"YAML config (default: ${ENV_VAR} or desk preset)")
        sp.add_argument("--preset", choices=("paper", "desk"), default=None)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")

    sp = sub.add_parser("gen-data", help="generate the synthetic mixture dataset")
    common(sp)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", type=Path, default=None)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a mean-velocity model")
    common(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, default=None)
    sp.add_argument("--path-kind", choices=[k.value for k in PathKind], default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--resume", type=Path, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("train-mr", help="train the mixing-ratio regressor")
    common(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, default=None)
    sp.set_defaults(func=cmd_train_mr)

    sp = sub.add_parser("extract", help="extract the enrolled speaker from a mixture")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--mixture", type=Path, required=True)
    sp.add_argument("--enroll", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--mr", dest="mr", action="store_true", help="start the jump at the predicted mixing ratio")
    sp.add_argument("--no-mr", dest="mr", action="store_false", help="start the jump at t = 0 (default)")
    sp.set_defaults(mr=False)
    sp.add_argument("--mr-checkpoint", type=Path, default=None)
    sp.add_argument("--tau", type=float, default=None, help="force the start coordinate")
    sp.add_argument("--chunk-frames", type=int, default=None)
    sp.add_argument("--dump-spectrograms", type=Path, default=None)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("eval", help="score a model on a dataset split")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, default=None)
    sp.add_argument("--bg-checkpoint", type=Path, default=None)
    sp.add_argument("--mr-checkpoint", type=Path, default=None)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--mode", choices=("standard", "ablation", "sweep"), default="standard")
    sp.add_argument("--tau-source", choices=("native", "predicted", "forced_zero", "forced_true"), default=None)
    sp.add_argument("--split", choices=("train", "val", "test"), default=None)
    sp.add_argument("--n-examples", type=int, default=None)
    sp.add_argument("--oracle", action="store_true", help="score the ideal estimate (pipeline check)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("show-config", help="print the resolved config")
    common(sp)
    sp.set_defaults(func=cmd_show_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ValidationError as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err)}), file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - top-level reporter
        log.debug("unhandled error", exc_info=True)
        print(json.dumps({"error": type(err).__name__, "message": str(err)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
