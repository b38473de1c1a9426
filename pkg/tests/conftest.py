import numpy as np
import pytest

from drdml import Dataset, LearnerSpec, NuisancePair


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


@pytest.fixture
def linear_pair():
    """Fast, fully deterministic learner bindings for pipeline tests."""
    spec = LearnerSpec("linear", feature_transform=("interactions",))
    return NuisancePair(g=spec, m=spec)


@pytest.fixture
def toy_dataset(rng):
    n = 120
    l = np.column_stack([rng.uniform(-2, 2, n), (rng.random(n) < 0.5).astype(float)])
    a = (rng.random(n) < 0.5).astype(float)
    y = 1.5 * a + l[:, 0] + rng.standard_normal(n)
    return Dataset(y=y, a=a, l=l)


def write_csv(path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
