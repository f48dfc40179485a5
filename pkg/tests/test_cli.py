import json

import numpy as np
import pytest

from crosspath.cli import main
from crosspath.config import ConfigError, ExperimentConfig

SMALL = """
[experiment]
name = tiny
seed = 3

[model]
paths = 2
mode = adaptive

[train]
epochs = 2
batch_size = 16
lr = 0.01
decay_epochs = 1
shift_pixels = 1

[data]
source = synthetic
per_cell = 6
size = 8
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "exp.ini"
    cfg.write_text(SMALL)
    assert main(["train", "--config", str(cfg), "--out", str(root / "runs")]) == 0
    return root, cfg, root / "runs" / "tiny"


def test_train_writes_run_directory(trained):
    _, _, run = trained
    for name in ("config.ini", "dataset.bin", "best.ckpt", "last.ckpt", "report.csv", "summary.json"):
        assert (run / name).is_file(), name
    assert len((run / "report.csv").read_text().splitlines()) == 3


def test_rerun_gives_identical_summary(trained, tmp_path):
    root, cfg, run = trained
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "tiny" / "summary.json").read_text()) == json.loads((run / "summary.json").read_text())


def test_saved_config_round_trips(trained):
    _, cfg, run = trained
    saved = ExperimentConfig.load(run / "config.ini")
    assert saved == ExperimentConfig.from_ini(saved.to_ini())
    assert saved.train.epochs == 2 and saved.model.paths == 2 and saved.seed == 3


def test_eval_trace_rank_synth_hist(trained, capsys):
    root, cfg, run = trained
    ck = str(run / "best.ckpt")
    out = str(root / "analysis")
    assert main(["eval", "--checkpoint", ck, "--config", str(cfg)]) == 0
    assert "accuracy" in capsys.readouterr().out
    assert main(["eval", "--checkpoint", ck, "--data", str(run / "dataset.bin")]) == 0
    assert main(["trace", "--checkpoint", ck, "--config", str(cfg), "--out", out]) == 0
    assert main(["rank", "--checkpoint", ck, "--config", str(cfg), "--out", out, "--k", "3"]) == 0
    assert main(["synth", "--checkpoint", ck, "--out", out, "--steps", "5", "--init", "noise"]) == 0
    assert main(["hist", "--checkpoint", ck, "--out", out]) == 0
    for name in ("trace.csv", "trace.json", "route_sample0.svg", "context_divergence.csv", "ranking.csv",
                 "synth.ppm", "objective.csv", "histograms.csv", "hist_conv2.svg"):
        assert (root / "analysis" / name).is_file(), name
    assert (root / "analysis" / "synth.ppm").read_bytes().startswith(b"P6")
    assert len((root / "analysis" / "objective.csv").read_text().splitlines()) == 7


def test_params_prints_totals(capsys):
    assert main(["params", "--quiet"]) == 0
    out = capsys.readouterr().out
    for total in ("550,570", "1,109,830", "1,664,917", "2,220,140"):
        assert total in out
    assert main(["params", "--paths", "2"]) == 0
    out = capsys.readouterr().out
    assert "cross1.gate0.fc1" in out and "1,109,830" in out


def test_gen_data(tmp_path):
    out = tmp_path / "d.bin"
    assert main(["gen-data", "--out", str(out), "--per-cell", "3", "--size", "8", "--seed", "4"]) == 0
    from crosspath.data import load_synthetic
    assert len(load_synthetic(out)) == 24


def test_eval_fresh_ten_class_model_is_near_chance(tmp_path, capsys):
    from crosspath.checkpoint import save_checkpoint
    from crosspath.data import Dataset, save_synthetic
    from crosspath.models import build_basecnn_x
    rng = np.random.default_rng(0)
    images = np.round(rng.random((500, 3, 8, 8)) * 255).astype(np.float32) / 255
    save_synthetic(Dataset(images, np.repeat(np.arange(10), 50), classes=10), tmp_path / "d.bin")
    save_checkpoint(build_basecnn_x(paths=2, classes=10, input_shape=(3, 8, 8), seed=0), tmp_path / "m.ckpt")
    assert main(["eval", "--checkpoint", str(tmp_path / "m.ckpt"), "--data", str(tmp_path / "d.bin")]) == 0
    acc = float(capsys.readouterr().out.split("accuracy")[1].split()[0])
    assert acc == pytest.approx(0.1, abs=0.05)


@pytest.mark.parametrize("argv,code", [
    (["train", "--config", "/nonexistent/exp.ini"], 2),
    (["train", "--set", "model.paths=0"], 2),
    (["train", "--set", "bogus.key=1"], 2),
    (["train", "--set", "train.lr=abc"], 2),
    (["eval", "--checkpoint", "/nonexistent.ckpt", "--data", "x.bin"], 3),
])
def test_error_exit_codes(argv, code, tmp_path):
    assert main(argv + ["--out", str(tmp_path)]) == code


def test_missing_cifar_dir_is_a_data_error(tmp_path, capsys):
    missing = tmp_path / "no_cifar_here"
    code = main(["train", "--set", "data.source=cifar10", "--set", f"data.cifar_dir={missing}", "--out", str(tmp_path)])
    assert code == 3
    assert str(missing) in capsys.readouterr().err


def test_checkpoint_dataset_mismatch_is_config_error(trained, tmp_path):
    _, _, run = trained
    from crosspath.data import SyntheticContextSpec, generate_synthetic, save_synthetic
    save_synthetic(generate_synthetic(SyntheticContextSpec(per_cell=2, size=12)), tmp_path / "big.bin")
    assert main(["eval", "--checkpoint", str(run / "best.ckpt"), "--data", str(tmp_path / "big.bin")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    code = main(["train", "--set", "train.epochs=2", "--set", "train.lr=1e6", "--set", "train.decay_epochs=",
                 "--set", "data.per_cell=4", "--set", "data.size=8", "--set", "model.paths=1",
                 "--out", str(tmp_path)])
    assert code == 4


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[train]\nepoch = 3\n")
