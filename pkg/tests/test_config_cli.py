import json

import numpy as np
import pytest
import yaml

from onestep_tse import cli
from onestep_tse.config import ENV_VAR, dump_config, from_dict, load_config
from onestep_tse.errors import ValidationError
from onestep_tse.frontend import read_spectrogram, read_wav
from onestep_tse.metrics import SI_SDR_CEILING

# tiny network and data so the CLI round trip runs in seconds
TINY_SETS = [
    "synth.n_train=16", "synth.n_val=4", "synth.n_test=4",
    "predictor.width=16", "predictor.n_blocks=1", "predictor.n_heads=2", "predictor.time_embed_dim=8",
    "train.epochs=1", "train.batch_size=8", "train.warmup_steps=1",
    "mr_train.epochs=1", "mr_train.model.hidden=8",
]


def _sets(extra=()):
    out = []
    for item in [*TINY_SETS, *extra]:
        out += ["--set", item]
    return out


def test_presets():
    desk, paper = load_config(preset="desk"), load_config(preset="paper")
    assert (paper.stft.n_fft, paper.stft.hop, paper.predictor.channels) == (510, 128, 512)
    assert (paper.train.lr_init, paper.train.warmup_steps, paper.train.clip_norm) == (2e-5, 1000, 0.5)
    assert (paper.train.batch_size, paper.train.grad_accum_steps, paper.train.epochs) == (42, 2, 150)
    assert paper.train.schedule.alpha_min == 0.1 and paper.train.sampler.mu == -0.4
    assert desk.preset == "desk" and desk.train.dtype == "float64"
    assert desk.predictor.channels == desk.stft.channels
    # desk inherits untouched paper values
    assert desk.train.objective == paper.train.objective


def test_yaml_round_trip(tmp_path):
    cfg = load_config(preset="desk")
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


@pytest.mark.parametrize("data, where", [
    ({"train": {"epoch": 3}}, "train.epoch: unknown key (did you mean 'epochs'?)"),
    ({"train": {"schedule": {"alpha_min": "low"}}}, "train.schedule.alpha_min: expected a number"),
    ({"train": {"batch_size": 0}}, "train: batch_size must be positive"),
    ({"predictor": {"channels": 100}}, "predictor.channels=100 does not match"),
    ({"preset": "huge"}, "unknown preset"),
    ({"train": {"path_kind": "sideways"}}, "train.path_kind: 'sideways' is not one of"),
    ({"stft": 5}, "stft: expected a mapping"),
])
def test_validation_messages(data, where):
    with pytest.raises(ValidationError, match=None) as info:
        from_dict(data)
    assert where in str(info.value)


def test_env_var_and_bad_files(tmp_path, monkeypatch):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"preset": "desk", "seed": 9}))
    monkeypatch.setenv(ENV_VAR, str(path))
    assert load_config().seed == 9
    (tmp_path / "bad.yaml").write_text("a: [1,")
    with pytest.raises(ValidationError, match="invalid YAML"):
        load_config(tmp_path / "bad.yaml")
    with pytest.raises(ValidationError, match="not found"):
        load_config(tmp_path / "missing.yaml")


def _run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(root / "data"), "--seed", "3", *_sets()]) == 0
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(root / "mt"), *_sets()]) == 0
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(root / "bg"),
                     "--path-kind", "background_to_target", *_sets()]) == 0
    assert cli.main(["train-mr", "--data", str(root / "data"), "--out", str(root / "mr"), *_sets()]) == 0
    return root


def test_gen_data_and_train_outputs(pipeline_dir):
    manifest = json.loads((pipeline_dir / "data" / "gen-data.manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["counts"] == {"train": 16, "val": 4, "test": 4}
    assert "code_version" in manifest and manifest["config"]["synth"]["n_train"] == 16
    for kind in ("mt", "bg"):
        assert (pipeline_dir / kind / "final.ckpt").exists()
        assert (pipeline_dir / kind / "telemetry.ndjson").read_text().strip()
    bg = json.loads((pipeline_dir / "bg" / "train.manifest.json").read_text())
    assert bg["path_kind"] == "background_to_target"
    assert (pipeline_dir / "mr" / "mr.ckpt").exists()


def test_extract_zero_model_returns_mixture(pipeline_dir, tmp_path, capsys):
    # a checkpoint whose output head is still zero maps the mixture to itself
    from onestep_tse.predictor import MeanVelocityNet
    from onestep_tse.training import load_model, save_model
    trained, _ = load_model(pipeline_dir / "mt" / "final.ckpt")
    save_model(tmp_path / "zero.ckpt", MeanVelocityNet(trained.cfg).double())
    mix = pipeline_dir / "data" / "test" / "test-000000_mix.wav"
    enroll = pipeline_dir / "data" / "test" / "test-000000_enroll.wav"
    code, out, _ = _run(["extract", "--checkpoint", tmp_path / "zero.ckpt", "--mixture", mix, "--enroll", enroll,
                         "--out", tmp_path / "out.wav", "--dump-spectrograms", tmp_path / "spg", *_sets()], capsys)
    assert code == 0, out
    y, s_hat = read_wav(mix), read_wav(tmp_path / "out.wav")
    assert len(s_hat) == len(y)
    assert np.max(np.abs(s_hat.samples - y.samples)) < 1e-6
    assert read_spectrogram(tmp_path / "spg" / "estimate.spg").shape[0] == 64


def test_extract_flags(pipeline_dir, tmp_path, capsys):
    mix = pipeline_dir / "data" / "test" / "test-000000_mix.wav"
    enroll = pipeline_dir / "data" / "test" / "test-000000_enroll.wav"
    base = ["extract", "--checkpoint", pipeline_dir / "mt" / "final.ckpt", "--mixture", mix, "--enroll", enroll]
    outs = {}
    for name, flags in {"mr": ["--mr", "--mr-checkpoint", pipeline_dir / "mr" / "mr.ckpt"],
                        "tau_a": ["--tau", "0.4"], "tau_b": ["--tau", "0.4"], "chunk": ["--chunk-frames", "20"]}.items():
        code, _, err = _run([*base, "--out", tmp_path / f"{name}.wav", *flags, *_sets()], capsys)
        assert code == 0, err
        outs[name] = read_wav(tmp_path / f"{name}.wav").samples
    assert np.array_equal(outs["tau_a"], outs["tau_b"])  # forced tau is deterministic
    code, _, err = _run([*base, "--out", tmp_path / "x.wav", "--mr", *_sets()], capsys)
    assert code == 2 and json.loads(err)["error"] == "ValidationError"


def test_eval_modes(pipeline_dir, tmp_path, capsys):
    data = pipeline_dir / "data"
    code, out, _ = _run(["eval", "--oracle", "--data", data, "--out", tmp_path / "oracle", *_sets()], capsys)
    assert code == 0
    summary = json.loads((tmp_path / "oracle" / "summary.json").read_text())
    assert summary["si_sdr"] == SI_SDR_CEILING and summary["count"] == 4
    rows = (tmp_path / "oracle" / "per_example.csv").read_text().splitlines()
    assert len(rows) == 5 and all(f",{SI_SDR_CEILING}," in r for r in rows[1:])

    code, out, _ = _run(["eval", "--mode", "ablation", "--checkpoint", pipeline_dir / "mt" / "final.ckpt",
                         "--bg-checkpoint", pipeline_dir / "bg" / "final.ckpt", "--mr-checkpoint",
                         pipeline_dir / "mr" / "mr.ckpt", "--data", data, "--out", tmp_path / "abl", *_sets()], capsys)
    assert code == 0
    assert (tmp_path / "abl" / "ablation.csv").read_text().count("\n") == 5
    assert "background_to_target" in (tmp_path / "abl" / "ablation.txt").read_text()

    code, out, _ = _run(["eval", "--mode", "sweep", "--bg-checkpoint", pipeline_dir / "bg" / "final.ckpt",
                         "--data", data, "--out", tmp_path / "sweep", *_sets()], capsys)
    assert code == 0
    assert (tmp_path / "sweep" / "tau_sweep.csv").read_text().splitlines()[0] == "x,y,series"


def test_errors_exit_codes(tmp_path, capsys):
    code, _, err = _run(["train", "--data", tmp_path / "nowhere"], capsys)
    assert code == 2 and "manifest not found" in json.loads(err)["message"]
    code, _, err = _run(["show-config", "--set", "train.epoch=3"], capsys)
    assert code == 2 and "did you mean 'epochs'" in err
    code, _, err = _run(["extract", "--checkpoint", tmp_path / "c", "--mixture", tmp_path / "m.wav",
                         "--enroll", tmp_path / "e.wav", "--out", tmp_path / "o.wav"], capsys)
    assert code == 2
    code, _, err = _run(["show-config", "--set", "novalue"], capsys)
    assert code == 2
    code, out, _ = _run(["show-config", "--preset", "paper"], capsys)
    assert code == 0 and yaml.safe_load(out)["stft"]["n_fft"] == 510
