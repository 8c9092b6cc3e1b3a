import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def synthetic_digits(count, size=12, seed=0, classes=10):
    """Ten stroke-like classes with jitter and noise; deterministic in ``seed``."""
    from regpool.data import LabeledDataset

    r = np.random.default_rng(seed)
    labels = np.arange(count) % classes
    r.shuffle(labels)
    images = np.zeros((count, 1, size, size))
    for i, k in enumerate(labels):
        img = np.zeros((size, size))
        dy, dx = r.integers(-1, 2, size=2)
        a = 2 + k % 5 + dy
        b = 2 + (k // 5) * 4 + dx
        img[a:a + 4, b] = 1.0
        img[a, b:b + 3 + k % 3] = 1.0
        img += 0.15 * r.random((size, size))
        images[i, 0] = np.clip(img, 0, 1)
    return LabeledDataset(images, labels, [str(c) for c in range(classes)])


@pytest.fixture(scope="session")
def digits_config(tmp_path_factory):
    """A config file pointing at small synthetic 10-class IDX files."""
    from regpool.data import write_idx

    d = tmp_path_factory.mktemp("digits")
    write_idx(d / "train-images.idx", d / "train-labels.idx", synthetic_digits(120, seed=1))
    write_idx(d / "test-images.idx", d / "test-labels.idx", synthetic_digits(60, seed=2))
    cfg = d / "run.cfg"
    cfg.write_text(
        "# synthetic desk fixture\n"
        "dataset.kind = idx\n"
        "dataset.train_images = train-images.idx\n"
        "dataset.train_labels = train-labels.idx\n"
        "dataset.test_images = test-images.idx\n"
        "dataset.test_labels = test-labels.idx\n"
        "dataset.train_subset = 64\n"
        "dataset.test_subset = all\n"
        "dataset.image_size = 20\n"
        "model.width = 0.0625\n"
        "pool.kind = regularized\n"
        "pool.n = 2\n"
        "pool.w = 3\n"
        "pool.s = 2\n"
        "optim.lr = 0.05\n"
        "train.epochs = 2\n"
        "train.batch_size = 16\n"
        "seeds = 0, 1\n"
    )
    return cfg


_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when == "teardown":
        return
    if report.when == "setup" and report.passed:
        return
    number, title = mark.args
    ok = _criteria.get(number, (title, True))[1] and report.passed
    _criteria[number] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {title}")
