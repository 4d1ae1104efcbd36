from pathlib import Path

import numpy as np
import pytest

from tgppo.milp import MilpInstance, read_instance

DATA = Path(__file__).resolve().parents[1] / "src" / "tgppo" / "data"


@pytest.fixture
def knapsack():
    return read_instance(DATA / "knapsack2.mps")


@pytest.fixture
def set_cover_fixture():
    return read_instance(DATA / "sc3x4.mps")


def small_binary(name, c, A, b, senses=None):
    A = np.asarray(A, dtype=float)
    m, n = A.shape
    return MilpInstance.from_dense(name, c, A, senses or ["L"] * m, b, np.zeros(n), np.ones(n),
                                   np.ones(n, dtype=bool))
