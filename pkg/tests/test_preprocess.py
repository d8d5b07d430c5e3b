import numpy as np
import pytest
from sklearn.pipeline import make_pipeline

from pregd.estimators import GDRegressor, PreGDRegressor
from pregd.linalg import EmptySampleError, RandomSource
from pregd.preprocess import (
    CorrelationReweighter,
    apply_preprocess,
    build_reweighter,
    estimate_correlations,
    population_reweighter,
)
from pregd.tasks import SparseLinearTask

from .conftest import make_instance


def test_estimate_correlations_examples():
    est = estimate_correlations([[1, 0], [0, 1]], [2, 3])
    np.testing.assert_array_equal(est.r_hat, [1.0, 1.5])
    assert est.n_used == 2
    np.testing.assert_array_equal(estimate_correlations([[1, 2], [3, 4]], [0, 0]).r_hat, 0)
    np.testing.assert_array_equal(estimate_correlations([[1.5, -2.0]], [3.0]).r_hat, [4.5, -6.0])
    with pytest.raises(EmptySampleError):
        estimate_correlations(np.zeros((0, 2)), np.zeros(0))


def test_build_reweighter():
    r = build_reweighter(estimate_correlations([[1, 0], [0, 1]], [2, 3]))
    np.testing.assert_array_equal(r, [1.0, 1.5])
    np.testing.assert_array_equal(build_reweighter(estimate_correlations([[1, 1]], [0])), 0)


def test_population_reweighter():
    w = np.array([0.5, 0, -0.5, 0])
    np.testing.assert_array_equal(population_reweighter(SparseLinearTask.from_weights(w)), w)
    np.testing.assert_array_equal(population_reweighter(SparseLinearTask.from_weights(np.zeros(3))), 0)
    task = SparseLinearTask.from_weights([1.0, -1.0], [2.0, 3.0])
    np.testing.assert_array_equal(population_reweighter(task), [2.0, -3.0])


def test_apply_preprocess(rng):
    task, data, _ = make_instance(rng, d=5, n=12, q=3)
    same = apply_preprocess(data, np.ones(5))
    np.testing.assert_array_equal(same.x, data.x)
    np.testing.assert_array_equal(same.query_x, data.query_x)
    zero = apply_preprocess(data, np.zeros(5))
    assert np.all(zero.x == 0) and np.all(zero.query_x == 0)
    np.testing.assert_array_equal(zero.y, data.y)
    np.testing.assert_array_equal(zero.query_y_true, data.query_y_true)
    r1, r2 = rng.split("r1").normal(5), rng.split("r2").normal(5)
    twice = apply_preprocess(apply_preprocess(data, r1), r2)
    once = apply_preprocess(data, r1 * r2)
    np.testing.assert_allclose(twice.x, once.x, rtol=1e-15)
    np.testing.assert_allclose(twice.query_x, once.query_x, rtol=1e-15)


def test_correlations_use_examples_only(rng):
    task, data, _ = make_instance(rng, d=4, n=10, q=5)
    r = estimate_correlations(*data.examples).r_hat
    np.testing.assert_allclose(r, data.x.T @ data.y / 10)


def test_sign_recovery_on_support():
    root = RandomSource(99)
    hits = total = 0
    for i in range(200):
        task, data, _ = make_instance(root.split(str(i)), d=16, s=4, n=1024, sigma=0.0)
        r = estimate_correlations(*data.examples).r_hat
        sup = list(task.support)
        hits += np.sum(np.sign(r[sup]) == np.sign(task.w_star[sup] * task.cov_diag[sup]))
        total += len(sup)
    assert hits / total >= 0.99


def test_concentration_rate():
    """log-log slope of mean max |r_hat - r| over n in 64..8192."""
    root = RandomSource(123)
    ns = [64 * 2**i for i in range(8)]
    means = []
    for n in ns:
        errs = []
        for i in range(200):
            task, data, _ = make_instance(root.split(f"{n}/{i}"), d=16, s=4, n=n, sigma=0.1)
            errs.append(np.max(np.abs(estimate_correlations(*data.examples).r_hat - population_reweighter(task))))
        means.append(np.mean(errs))
    slope = np.polyfit(np.log(ns), np.log(means), 1)[0]
    assert -0.6 <= slope <= -0.4


def test_transformer_api(rng):
    task, data, _ = make_instance(rng, d=6, n=40)
    tr = CorrelationReweighter().fit(*data.examples)
    np.testing.assert_array_equal(tr.r_hat_, estimate_correlations(*data.examples).r_hat)
    np.testing.assert_array_equal(tr.transform(data.query_x), data.query_x * tr.r_hat_)
    assert tr.get_params() == {}


def test_pipeline_equals_pre_gd(rng):
    task, data, _ = make_instance(rng, d=6, n=40, q=4)
    pipe = make_pipeline(CorrelationReweighter(), GDRegressor(eta=0.5, n_steps=10)).fit(*data.examples)
    direct = PreGDRegressor(eta=0.5, n_steps=10).fit(*data.examples)
    np.testing.assert_allclose(pipe.predict(data.query_x), direct.predict(data.query_x), rtol=1e-12, atol=1e-15)
