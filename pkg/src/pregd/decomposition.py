"""Exact bias/variance split of GD excess risk for a realized noise vector.

Writing the final-iterate error in prediction space as ``a + b``, with ``a``
the noise-free (bias) part and ``b`` the part driven by the example noise,
the excess risk is ``|a|^2 + |b|^2 + 2 <a, b>``. The interaction term is
reported separately as ``cross``: it has zero mean over the noise for a fixed
design in raw GD, but it is not zero for any one draw.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .estimators import gd_solve, pre_gd_solve
from .linalg import ContractViolation, as_vector, empirical_second_moment
from .tasks import excess_risk_pre, excess_risk_raw

SUPPORT_EPS = 1e-12


class DegenerateReweightingWarning(RuntimeWarning):
    """Some support coordinate has a (numerically) zero estimated correlation."""


@dataclass(frozen=True)
class RiskDecomposition:
    bias: float
    variance: float
    cross: float
    total: float

    @property
    def identity_gap(self):
        """|bias + variance + cross - total|."""
        return abs(self.bias + self.variance + self.cross - self.total)

    @property
    def two_term_gap(self):
        """|bias + variance - total|, i.e. the size of the dropped interaction."""
        return abs(self.bias + self.variance - self.total)


def _split(x_feat, noise, cov_diag, out_scale, target, eta, t):
    """Closed-form bias/noise vectors of t-step GD from zero on ``x_feat``.

    ``target`` is the parameter GD contracts towards without noise and
    ``out_scale`` maps parameters to raw-feature coefficients.
    """
    n, d = x_feat.shape
    contraction = np.eye(d) - eta * empirical_second_moment(x_feat)
    power = np.eye(d)
    geometric = np.zeros((d, d))
    for _ in range(t):
        geometric += power
        power = power @ contraction
    sqrt_cov = np.sqrt(cov_diag)
    bias_vec = -sqrt_cov * out_scale * (power @ target)
    noise_vec = eta * sqrt_cov * out_scale * (geometric @ (x_feat.T @ noise) / n)
    return bias_vec, noise_vec


def _decomposition(bias_vec, noise_vec, total):
    return RiskDecomposition(
        bias=float(bias_vec @ bias_vec),
        variance=float(noise_vec @ noise_vec),
        cross=float(2.0 * bias_vec @ noise_vec),
        total=float(total),
    )


def _check(data, noise, task):
    noise = as_vector(noise, "noise")
    if noise.shape[0] != data.n:
        raise ContractViolation(f"noise has dim {noise.shape[0]}, dataset has n={data.n}")
    if task.d != data.d:
        raise ContractViolation(f"task dim {task.d} != dataset dim {data.d}")
    return noise


def decompose_pre_gd(data, noise, task, eta, t):
    """Bias, variance and interaction of correlation-reweighted GD.

    ``total`` is the closed-form excess risk of the actual t-step iterate, so
    the identity ``bias + variance + cross == total`` checks the recursion
    algebra against an independent path.
    """
    noise = _check(data, noise, task)
    traj = pre_gd_solve(data.x, data.y, eta, t)
    r_hat = traj.r_hat
    support = list(task.support)
    if np.any(np.abs(r_hat[support]) < SUPPORT_EPS):
        warnings.warn(
            "estimated correlation vanishes on the support; decomposition identity degrades",
            DegenerateReweightingWarning,
        )
    r_bar = np.zeros(task.d)
    with np.errstate(divide="ignore"):
        r_bar[support] = 1.0 / r_hat[support]
    with np.errstate(invalid="ignore"):
        bias_vec, noise_vec = _split(data.x * r_hat, noise, task.cov_diag, r_hat, r_bar * task.w_star, eta, t)
    return _decomposition(bias_vec, noise_vec, excess_risk_pre(traj.final, r_hat, task))


def decompose_raw_gd(data, noise, task, eta, t):
    noise = _check(data, noise, task)
    traj = gd_solve(data.x, data.y, eta, t)
    ones = np.ones(task.d)
    bias_vec, noise_vec = _split(data.x, noise, task.cov_diag, ones, task.w_star, eta, t)
    return _decomposition(bias_vec, noise_vec, excess_risk_raw(traj.final, task))
