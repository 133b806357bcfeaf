import numpy as np
import pytest

from modules.config import CvConfig, EstimationConfig
from modules.scores import Dataset
from modules.simulation import ScenarioSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def fast_cv():
    return CvConfig(n_folds=3, n_lambda=20)


@pytest.fixture
def fast_config(fast_cv):
    return EstimationConfig(cv=fast_cv)


@pytest.fixture
def linear_dataset():
    dataset, _ = generate(ScenarioSpec("fixture", n=200, p=12, seed=3), 0)
    return dataset


@pytest.fixture
def pair_dataset():
    # two units, one per arm
    return Dataset.from_arrays([3.0, 1.0], [1, 0], [[0.0], [1.0]])


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
