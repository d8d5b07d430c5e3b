import numpy as np
import pytest

from pregd.decomposition import DegenerateReweightingWarning, decompose_pre_gd, decompose_raw_gd
from pregd.linalg import ContractViolation, RandomSource
from pregd.tasks import InContextDataset, SparseLinearTask

from .conftest import make_instance


@pytest.mark.parametrize("fn", [decompose_pre_gd, decompose_raw_gd])
def test_noiseless_has_no_variance(rng, fn):
    task, data, noise = make_instance(rng, d=6, s=2, n=30, sigma=0.0)
    dec = fn(data, noise, task, 0.3, 10)
    assert dec.variance == 0 and dec.cross == 0
    assert abs(dec.bias - dec.total) <= 1e-12 * (1 + dec.total)


@pytest.mark.parametrize("fn", [decompose_pre_gd, decompose_raw_gd])
def test_zero_steps_is_null_risk(rng, fn):
    task, data, noise = make_instance(rng, d=6, s=2, n=30, sigma=0.5)
    dec = fn(data, noise, task, 0.3, 0)
    null = float(task.cov_diag @ task.w_star**2)
    assert dec.variance == 0 and dec.cross == 0
    assert dec.bias == pytest.approx(null, rel=1e-14)
    assert dec.total == pytest.approx(null, rel=1e-14)


def test_three_term_identity_random_instances():
    root = RandomSource(8)
    for i in range(60):
        g = root.split(f"shape{i}").generator
        d = int(g.choice([2, 4, 8, 16]))
        n = int(g.integers(4, 80))
        t = int(g.integers(0, 40))
        task, data, noise = make_instance(root.split(str(i)), d=d, s=max(1, d // 2), n=n, sigma=0.3)
        for fn, eta in ((decompose_pre_gd, 0.5), (decompose_raw_gd, 0.2)):
            dec = fn(data, noise, task, eta, t)
            assert dec.identity_gap <= 1e-8 * (1 + dec.total)
            assert dec.bias >= 0 and dec.variance >= 0


def test_cross_term_averages_out_for_fixed_design():
    """Raw GD with a fixed design: the interaction has zero mean over the noise."""
    root = RandomSource(9)
    task, data, _ = make_instance(root.split("base"), d=8, s=2, n=40, sigma=0.5)
    clean = data.x @ task.w_star
    crosses, scale = [], []
    for i in range(4000):
        noise = 0.5 * root.split(str(i)).normal(40)
        noisy = InContextDataset(data.x, clean + noise, data.query_x, data.query_y_true)
        dec = decompose_raw_gd(noisy, noise, task, 0.2, 5)
        crosses.append(dec.cross)
        scale.append(abs(dec.cross))
    crosses = np.array(crosses)
    assert abs(crosses.mean()) <= 4 * crosses.std() / np.sqrt(len(crosses))
    assert np.mean(scale) > 1e-6  # individually nonzero


def test_degenerate_reweighting_warns():
    task = SparseLinearTask.from_weights([1.0, 0.0])
    # x_0 orthogonal to y: r_hat_0 = 0 on the support
    data = InContextDataset([[1.0, 1.0], [-1.0, 1.0]], [1.0, 1.0], [[1.0, 0.0]], [1.0])
    with pytest.warns(DegenerateReweightingWarning):
        decompose_pre_gd(data, np.array([0.0, 2.0]), task, 0.1, 3)


def test_noise_length_checked(rng):
    task, data, noise = make_instance(rng, d=4, s=2, n=10)
    with pytest.raises(ContractViolation):
        decompose_raw_gd(data, noise[:-1], task, 0.1, 2)
