import sys
from pathlib import Path

import numpy as np
import pytest

from shoulderx.data import FeatureTable, PredictionTable

sys.path.insert(0, str(Path(__file__).parent))

DATA_DIR = Path(__file__).parent / "data"


def separable_providers(n_train=400, n_test=100, dims=(80, 1664, 960), seed=2021,
                        shift=2.0, noise=1.0):
    """Linearly separable synthetic provider features.

    Each provider sees ``(2y - 1) * shift * u + N(0, noise)`` with its own
    random sign pattern ``u``. Returns ``(train_tables, test_tables)``.
    """
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    y = np.r_[np.zeros(n // 2, dtype=np.int64), np.ones(n - n // 2, dtype=np.int64)]
    rng.shuffle(y)
    ids = tuple(f"img{i:04d}" for i in range(n))
    tables = []
    for d in dims:
        u = rng.choice([-1.0, 1.0], size=d)
        x = (2 * y[:, None] - 1) * shift * u + rng.normal(0.0, noise, size=(n, d))
        tables.append(FeatureTable(d, ids, y, x))
    train = [t.take(range(n_train)) for t in tables]
    test = [t.take(range(n_train, n)) for t in tables]
    return train, test


def random_prediction_table(n, rng, prefix="s"):
    scores = rng.random((n, 2)).astype(np.float32)
    labels = rng.integers(0, 2, n)
    return PredictionTable.from_scores([f"{prefix}{i}" for i in range(n)], labels, scores)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def providers():
    return separable_providers()


def table_from_counts(tp, fp, fn, tn, seed=0, prefix="t"):
    """A shuffled PredictionTable whose confusion matrix is exactly the given counts.

    Scores for the predicted class are drawn in (0.5, 1]; score0 = 1 - score1.
    """
    rng = np.random.default_rng(seed)
    labels = np.r_[np.ones(tp), np.zeros(fp), np.ones(fn), np.zeros(tn)].astype(np.int64)
    pred = np.r_[np.ones(tp + fp), np.zeros(fn + tn)].astype(np.int64)
    order = rng.permutation(labels.size)
    labels, pred = labels[order], pred[order]
    margin = rng.uniform(0.01, 0.49, labels.size)
    s1 = np.where(pred == 1, 0.5 + margin, 0.5 - margin)
    scores = np.stack([1.0 - s1, s1], axis=1)
    ids = [f"{prefix}{i:04d}" for i in range(labels.size)]
    return PredictionTable.from_scores(ids, labels, scores)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
