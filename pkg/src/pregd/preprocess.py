"""Correlation reweighting of in-context features.

Each feature is rescaled by its empirical correlation with the label,
r_hat_j = (1/n) sum_i x_ij y_i, estimated from the examples only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .linalg import ContractViolation, EmptySampleError, diag_apply, frozen
from .tasks import InContextDataset


@dataclass(frozen=True)
class CorrelationEstimate:
    r_hat: np.ndarray
    n_used: int


def estimate_correlations(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptySampleError("correlations need at least one example")
    if y.shape != (x.shape[0],):
        raise ContractViolation(f"{x.shape[0]} examples but labels of shape {y.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ContractViolation("examples have non-finite entries")
    return CorrelationEstimate(frozen(x.T @ y / x.shape[0]), x.shape[0])


def build_reweighter(estimate):
    """Diagonal of R_hat; near-zero correlations are kept, not thresholded."""
    return frozen(estimate.r_hat)


def population_reweighter(task):
    """Population diagonal r_j = w*_j Sigma_jj."""
    return frozen(task.w_star * task.cov_diag)


def apply_preprocess(data, r_hat):
    """Reweight every example and query feature by ``r_hat``; labels untouched."""
    return InContextDataset(
        diag_apply(r_hat, data.x),
        data.y,
        diag_apply(r_hat, data.query_x),
        data.query_y_true,
    )


class CorrelationReweighter(TransformerMixin, BaseEstimator):
    """Scikit-learn transformer form of the reweighting step.

    ``fit(X, y)`` estimates the correlations; ``transform(X)`` returns
    ``X * r_hat_``. Composes with :class:`pregd.estimators.GDRegressor` in a
    pipeline to give preprocess-then-GD.
    """

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        est = estimate_correlations(X, y)
        self.r_hat_ = est.r_hat
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "r_hat_")
        X = check_array(X, dtype=np.float64)
        return diag_apply(self.r_hat_, X)
