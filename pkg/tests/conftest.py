import numpy as np
import pytest
from hypothesis import settings

from invreg import MultiEnvDataset, summaries_from_moments

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def random_dataset(seed, p=4, n=30, d=3, shift=2.0, labeled=None) -> MultiEnvDataset:
    """Linear data with per-environment mean shifts; all rows labeled unless ``labeled`` given."""
    rng = np.random.default_rng(seed)
    beta = rng.standard_normal(d)
    X, y, env = [], [], []
    for i in range(p):
        Xe = rng.standard_normal((n, d)) + shift * rng.standard_normal(d)
        X.append(Xe)
        y.append(Xe @ beta + 0.5 * rng.standard_normal(n))
        env += [f"e{i + 1}"] * n
    ds = MultiEnvDataset.from_arrays(np.vstack(X), np.concatenate(y), np.array(env, dtype=object))
    return ds if labeled is None else ds.mask_labels(labeled)


@pytest.fixture
def swapped_cov_summaries():
    # two environments with covariances diag(2, 1) and diag(1, 2)
    return summaries_from_moments(np.zeros((2, 2)), [np.diag([2.0, 1.0]), np.diag([1.0, 2.0])])
