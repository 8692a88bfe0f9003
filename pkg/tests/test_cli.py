import subprocess
import sys

import numpy as np
import pytest

from fgrnet.cli import main
from fgrnet.config import RunConfig
from fgrnet.exceptions import ConfigError
from fgrnet.imageio import read_ppm, read_saliency, write_ppm
from fgrnet.model import ModelConfig, build_model, save_checkpoint
from fgrnet.synthdata import make_dataset, save_dataset


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """A 32 px dataset plus an untrained checkpoint, enough for wiring checks."""
    root = tmp_path_factory.mktemp("cli")
    save_dataset(make_dataset(20, "two_class", seed=0, size=32), root / "data")
    run = root / "run"
    run.mkdir()
    save_checkpoint(build_model(ModelConfig.desk(input_size=32), seed=0), run / "checkpoint.fgr")
    return root


def test_end_to_end_pipeline_reaches_accuracy(cli_pipelines):
    root, codes = cli_pipelines[0]
    assert codes == [0] * len(codes)
    metrics = dict(line.split("\t")[:2] for line in (root / "run" / "metrics.txt").read_text().splitlines()[:4])
    assert float(metrics["accuracy"]) >= 0.90
    assert (root / "run" / "config.train.ini").exists()
    assert (root / "run" / "history.tsv").read_text().startswith("epoch\t")


def test_explain_writes_map_and_overlay(small_run):
    out = small_run / "explain"
    code = main(["explain", "--data", str(small_run / "data"), "--checkpoint", str(small_run / "run" / "checkpoint.fgr"),
                 "--out", str(out), "--method", "gradcam", "--class", "1"])
    assert code == 0
    sal = list(out.glob("*.sal"))
    overlays = list(out.glob("*_overlay.ppm"))
    assert len(sal) == 1 and len(overlays) == 1
    assert read_saliency(sal[0]).shape == (32, 32)
    assert read_ppm(overlays[0]).shape == (3, 32, 32)


def test_explain_from_image_file(small_run, tmp_path):
    image = small_run / "data" / "test_00000.ppm"
    code = main(["explain", "--image", str(image), "--checkpoint", str(small_run / "run" / "checkpoint.fgr"),
                 "--out", str(tmp_path), "--method", "gradient"])
    assert code == 0
    assert (tmp_path / "test_00000_gradient.sal").exists()


def test_bench_writes_four_rows(small_run, tmp_path):
    code = main(["bench", "--data", str(small_run / "data"), "--checkpoint", str(small_run / "run" / "checkpoint.fgr"),
                 "--out", str(tmp_path), "--runs", "3", "--patch", "8"])
    assert code == 0
    rows = (tmp_path / "timing.tsv").read_text().splitlines()
    assert [r.split("\t")[0] for r in rows[1:]] == ["prediction", "Gradient", "GradCAM", "Occlusion"]


def test_perturb_and_attack_outputs(small_run, tmp_path):
    args = ["--data", str(small_run / "data"), "--checkpoint", str(small_run / "run" / "checkpoint.fgr"),
            "--out", str(tmp_path)]
    assert main(["perturb", *args, "--n", "4"]) == 0
    assert len((tmp_path / "robustness.tsv").read_text().splitlines()) == 8
    assert main(["attack", *args, "--steps", "2", "--radius", "0.05", "--class", "0"]) == 0
    trace = (tmp_path / "test_00000_attack.tsv").read_text().splitlines()
    assert len(trace) == 4
    assert all(float(r.split("\t")[2]) <= 0.05 + 1e-9 for r in trace[1:])


def test_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    assert main(["eval", "--data", str(tmp_path), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("fgrnet: error:")


def test_unreadable_image_is_runtime_error(small_run, tmp_path, capsys):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"junk")
    code = main(["explain", "--image", str(bad), "--checkpoint", str(small_run / "run" / "checkpoint.fgr"),
                 "--out", str(tmp_path)])
    assert code == 2
    assert "fgrnet: error:" in capsys.readouterr().err


def test_wrong_size_image_is_runtime_error(small_run, tmp_path):
    big = tmp_path / "big.ppm"
    write_ppm(big, np.zeros((3, 64, 64)))
    code = main(["explain", "--image", str(big), "--checkpoint", str(small_run / "run" / "checkpoint.fgr"),
                 "--out", str(tmp_path)])
    assert code == 2


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main([]) == 1
    assert main(["fly"]) == 1
    assert main(["explain", "--method", "lime"]) == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nmomentum = 0.9\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "momentum" in capsys.readouterr().err


def test_malformed_config_is_usage_error(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("this is not = [ini\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fgrnet", "gen-data", "--n", "20", "--out", str(tmp_path / "d")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "d" / "manifest.tsv").exists()
    assert (tmp_path / "d" / "config.gen-data.ini").exists()


# --- run configuration ---------------------------------------------------------------

def test_config_rejects_unknown_keys_and_sections(tmp_path):
    cfg = RunConfig()
    with pytest.raises(ConfigError):
        cfg.set("train", "momentum", "0.9")
    with pytest.raises(ConfigError):
        cfg.set("optimizer", "lr", "1")
    with pytest.raises(ConfigError):
        cfg.set("train", "epochs", "many")


def test_config_resolves_presets_and_round_trips(tmp_path):
    cfg = RunConfig()
    cfg.set("model", "preset", "paper")
    cfg.set("model", "num_classes", "3")
    model = cfg.model_config()
    assert model.input_size == 480 and model.block_channels == [64, 128, 256, 512, 512]
    path = tmp_path / "c.ini"
    cfg.write(path)
    again = RunConfig.from_file(path)
    assert again.values == cfg.values
    assert again.model_config() == model


def test_config_builds_train_config():
    cfg = RunConfig()
    cfg.set("train", "lr_decay_gamma", "0.5")
    cfg.set("run", "seed", "9")
    tc = cfg.train_config()
    assert tc.lr_decay_gamma == 0.5 and tc.seed == 9 and tc.epochs == 15
