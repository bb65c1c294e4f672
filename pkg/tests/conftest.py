import os

import numpy as np
import pytest

from cpl.data import Dataset

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture_path(name):
    return os.path.join(FIXTURES, name)


def regression_dataset(X, mu, y, kind="abs_residual"):
    return Dataset.from_arrays(np.asarray(X, dtype=float), np.asarray(mu, dtype=float), np.asarray(y, dtype=float),
                               task="regression", payload_kind=kind)


def classification_dataset(X, scores, labels, weights=None):
    scores = np.asarray(scores, dtype=float)
    return Dataset.from_arrays(np.asarray(X, dtype=float), scores, np.asarray(labels), task="classification",
                               payload_kind="classification", K=scores.shape[1], weights=weights)


# Ten hand-checkable records: columns (x0, x1), prediction mu, label y.
# Scores |y - mu|: .5 1.5 .2 .9 2 0 1.1 .5 .3 .8
TEN_RECORDS = np.array([
    [0, 0, 0.0, 0.5],
    [0, 1, 0.0, 1.5],
    [1, 0, 0.0, 0.2],
    [1, 1, 0.0, -0.9],
    [0, 0, 1.0, 3.0],
    [0, 1, 0.0, 0.0],
    [1, 0, 0.0, 1.1],
    [1, 1, 2.0, 2.5],
    [0, 0, 0.0, -0.3],
    [1, 1, 0.0, 0.8],
])


@pytest.fixture
def ten_records():
    r = TEN_RECORDS
    return regression_dataset(r[:, :2], r[:, 2], r[:, 3])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
