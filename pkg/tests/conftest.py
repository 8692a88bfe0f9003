import time

import numpy as np
import pytest

from fgrnet.model import ModelConfig, build_model
from fgrnet.synthdata import SyntheticDataset, make_dataset
from fgrnet.training import TrainConfig, mean_ssim, train


class DeskRun:
    """The seeded 200-sample desk training run shared by the slow tests."""

    def __init__(self):
        self.dataset = make_dataset(200, "two_class", seed=0)
        self.X_train, self.y_train = SyntheticDataset.arrays(self.dataset.train)
        self.X_test, self.y_test = SyntheticDataset.arrays(self.dataset.test)
        self.config = ModelConfig.desk(num_classes=2)
        self.initial = build_model(self.config, seed=0)
        self.train_config = TrainConfig(learning_rate=1e-3, batch_size=2, epochs=15, alpha=0.5, rec_loss="mse", seed=0)
        self.initial_ssim = mean_ssim(self.initial, self.X_test)
        start = time.perf_counter()
        self.params, self.history = train(self.initial, self.X_train, self.y_train, self.train_config)
        self.elapsed = time.perf_counter() - start


@pytest.fixture(scope="session")
def desk_run() -> DeskRun:
    return DeskRun()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


PIPELINE_CONFIG = """\
[run]
seed = 0

[data]
n = 200
scheme = two_class

[train]
epochs = 15
batch_size = 2
learning_rate = 0.001
alpha = 0.5
rec_loss = mse
"""


def run_cli_pipeline(root):
    """gen-data, train, eval, explain (all methods), perturb and attack through the CLI."""
    from fgrnet.cli import main

    root.mkdir(parents=True, exist_ok=True)
    config = root / "run.ini"
    config.write_text(PIPELINE_CONFIG)
    data, run = str(root / "data"), str(root / "run")
    steps = [
        ["gen-data", "--config", str(config), "--out", data],
        ["train", "--config", str(config), "--data", data, "--out", run],
        ["eval", "--config", str(config), "--data", data, "--out", run],
        ["explain", "--config", str(config), "--data", data, "--out", run, "--method", "gradient"],
        ["explain", "--config", str(config), "--data", data, "--out", run, "--method", "gradcam"],
        ["explain", "--config", str(config), "--data", data, "--out", run, "--method", "occlusion", "--patch", "8"],
        ["perturb", "--config", str(config), "--data", data, "--out", run, "--n", "20"],
        ["attack", "--config", str(config), "--data", data, "--out", run, "--steps", "5"],
    ]
    codes = [main(argv) for argv in steps]
    return root, codes


@pytest.fixture(scope="session")
def cli_pipelines(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    return [run_cli_pipeline(base / name) for name in ("first", "second")]


ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion's verdict, then assert it."""

    def check(number: int, title: str, passed: bool, detail: str = ""):
        ACCEPTANCE_RESULTS[number] = (title, bool(passed), detail)
        assert passed, f"criterion {number} ({title}) failed: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number:>2}. {title}: {detail}")
