import numpy as np
import pytest

from pregd.linalg import RandomSource
from pregd.tasks import sample_dataset, sample_task


@pytest.fixture
def rng():
    return RandomSource(20240611)


def make_instance(rng, d=8, s=2, n=32, q=1, sigma=0.1, prior="rademacher_over_sqrt_s", cov=None):
    cov = np.ones(d) if cov is None else cov
    task = sample_task(d, s, cov, sigma, prior, rng.split("task"))
    data, noise = sample_dataset(task, n, q, rng.split("data"))
    return task, data, noise
