import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from ensemble_forge import harness
from ensemble_forge.mnist_io import Dataset, find_idx_file, load_mnist, subset

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

REPO = Path(__file__).resolve().parents[1]
DATA_DIR = Path(os.environ.get("ENSEMBLE_FORGE_DATA", REPO / "data" / "mnist"))


def _have_mnist() -> bool:
    try:
        find_idx_file(DATA_DIR, "train-images-idx3-ubyte")
        find_idx_file(DATA_DIR, "t10k-images-idx3-ubyte")
    except Exception:
        return False
    return True


needs_mnist = pytest.mark.skipif(not _have_mnist(), reason=f"MNIST not found in {DATA_DIR}")


def random_dataset(n, seed=0, mean_offset=0.0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, 784)), rng.integers(0, 10, n), mean_offset)


@pytest.fixture(scope="session")
def mnist():
    if not _have_mnist():
        pytest.skip(f"MNIST not found in {DATA_DIR}")
    return load_mnist(DATA_DIR)


@pytest.fixture(scope="session")
def desk_data(mnist):
    """The desk-scale split: 10k stratified train rows, 2k test rows."""
    cfg = harness.ExperimentConfig()
    train, test = mnist
    return subset(train, cfg.train_subset, cfg.subset_seed), subset(test, cfg.test_subset, cfg.subset_seed)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory, desk_data):
    """One full desk-scale experiment (all three variants) with a model cache.

    Shared by the acceptance criteria and by the harness/orchestrator tests
    that need trained 32-model ensembles; takes a few minutes.
    """
    root = tmp_path_factory.mktemp("desk")
    cfg = harness.ExperimentConfig(
        data_dir=str(DATA_DIR), output_dir=str(root / "out"), cache_dir=str(root / "cache"),
    )
    result = harness.run_experiment(cfg, *desk_data)
    return cfg, result


# --- acceptance summary -----------------------------------------------------

_CRITERIA: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    _CRITERIA[name] = report.outcome.upper()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        terminalreporter.write_line(f"{_CRITERIA[name]:<8} {name}")
