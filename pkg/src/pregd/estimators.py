"""Regression procedures compared in the experiments.

All solvers take the example design ``x`` (n x d) and labels ``y``; none of
them can see query labels. Functional forms come first, scikit-learn
estimator wrappers at the bottom.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .linalg import ContractViolation, EmptySampleError, as_vector, empirical_second_moment
from .preprocess import build_reweighter, estimate_correlations
from .tasks import excess_risk_pre, excess_risk_raw

ETA_GRID = (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
PENALTY_GRID = (1.0, 1e-1, 1e-2, 1e-3, 1e-4)


class DivergenceError(ArithmeticError):
    def __init__(self, step):
        super().__init__(f"gradient descent diverged: non-finite iterate at step {step}")
        self.step = step


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GdTrajectory:
    iterates: np.ndarray  # (t+1, d)
    step_size: float
    preprocessed: bool = False
    r_hat: np.ndarray | None = None

    @property
    def steps(self):
        return self.iterates.shape[0] - 1

    @property
    def final(self):
        return self.iterates[-1]

    def coef(self, step=None):
        """Raw-feature coefficient of iterate ``step`` (``R_hat w`` when preprocessed)."""
        w = self.iterates[-1 if step is None else step]
        return w * self.r_hat if self.preprocessed else w.copy()


def _examples(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptySampleError("need at least one example")
    if y.shape != (x.shape[0],):
        raise ContractViolation(f"{x.shape[0]} examples but labels of shape {y.shape}")
    return x, y


def gd_solve(x, y, eta, t, w0=None):
    """Full-batch GD on (1/2n)||y - Xw||^2 keeping every iterate."""
    x, y = _examples(x, y)
    if not eta > 0:
        raise ContractViolation(f"step size must be positive, got {eta}")
    t = int(t)
    if t < 0:
        raise ContractViolation(f"step count must be >= 0, got {t}")
    n, d = x.shape
    w = np.zeros(d) if w0 is None else as_vector(w0, "w0").copy()
    if w.shape[0] != d:
        raise ContractViolation(f"w0 has dim {w.shape[0]}, examples have dim {d}")
    iterates = np.empty((t + 1, d))
    iterates[0] = w
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(t):
            w = w - (eta / n) * (x.T @ (x @ w - y))
            if not np.all(np.isfinite(w)):
                raise DivergenceError(k + 1)
            iterates[k + 1] = w
    iterates.setflags(write=False)
    return GdTrajectory(iterates, float(eta))


def pre_gd_solve(x, y, eta, t):
    """Reweight the examples by their label correlations, then GD from zero."""
    x, y = _examples(x, y)
    r_hat = build_reweighter(estimate_correlations(x, y))
    traj = gd_solve(x * r_hat, y, eta, t)
    return GdTrajectory(traj.iterates, traj.step_size, preprocessed=True, r_hat=r_hat)


def ridge_solve(x, y, lam):
    """Closed-form ridge: (Sigma_hat + lam I)^{-1} X^T y / n."""
    x, y = _examples(x, y)
    if not lam >= 0:
        raise ContractViolation(f"ridge penalty must be >= 0, got {lam}")
    n, d = x.shape
    a = empirical_second_moment(x) + lam * np.eye(d)
    b = x.T @ y / n
    if lam == 0 and (np.linalg.matrix_rank(x) < d or np.linalg.cond(a) > 1e12):
        raise SingularSystemError("ridge system is singular at lam=0; use ols_solve for the min-norm solution")
    return np.linalg.solve(a, b)


def ols_solve(x, y):
    """Least squares; the minimum-norm interpolant when rank(X) < d."""
    x, y = _examples(x, y)
    n, d = x.shape
    if n >= d and np.linalg.matrix_rank(x) == d:
        return np.linalg.lstsq(x, y, rcond=None)[0]
    gram = x @ x.T
    if np.linalg.matrix_rank(gram) == n:
        return x.T @ np.linalg.solve(gram, y)
    warnings.warn("rank-deficient design: falling back to the pseudo-inverse solution", RuntimeWarning)
    return np.linalg.pinv(x) @ y


def soft_threshold(z, thr):
    return np.sign(z) * max(abs(z) - thr, 0.0)


def lasso_objective(x, y, w, alpha):
    r = y - x @ w
    return float(r @ r / (2 * x.shape[0]) + alpha * np.abs(w).sum())


@dataclass(frozen=True)
class LassoResult:
    coef: np.ndarray
    converged: bool
    sweeps: int
    objectives: tuple


def lasso_cd(x, y, alpha, max_sweeps=1000, tol=1e-8, w0=None):
    """Cyclic coordinate descent for (1/2n)||y - Xw||^2 + alpha ||w||_1."""
    x, y = _examples(x, y)
    if not alpha > 0:
        raise ContractViolation(f"alpha must be positive, got {alpha}")
    n, d = x.shape
    w = np.zeros(d) if w0 is None else np.array(w0, dtype=np.float64)
    col_sq = np.einsum("ij,ij->j", x, x) / n
    resid = y - x @ w
    objectives = [lasso_objective(x, y, w, alpha)]
    converged = False
    sweeps = 0
    for sweeps in range(1, int(max_sweeps) + 1):
        max_change = 0.0
        for j in range(d):
            if col_sq[j] == 0.0:
                new = 0.0
            else:
                rho = x[:, j] @ resid / n + col_sq[j] * w[j]
                new = soft_threshold(rho, alpha) / col_sq[j]
            delta = new - w[j]
            if delta != 0.0:
                resid -= delta * x[:, j]
                w[j] = new
                max_change = max(max_change, abs(delta))
        objectives.append(lasso_objective(x, y, w, alpha))
        if max_change < tol:
            converged = True
            break
    return LassoResult(w, converged, sweeps, tuple(objectives))


@dataclass(frozen=True)
class ScheduleSuggestion:
    eta: float
    t: int
    beta: float
    eta_t_target: float
    capped: bool


T_CEILING = 2**16


def theoretical_schedule(task, n, delta=0.05):
    """Step size and step count from the preprocess-then-GD rate, constants set to 1.

    eta = 1 / (2 ||R Sigma R||), and eta * t targets
    (1/beta) * (sig^2 Tr(R Sigma R) log(d/delta)/n + sig^2 s Tr(Sigma) log^2(d/delta)/n^2)^(-1/2).
    With sig = 0 the target is infinite and t is capped at 2**16.
    """
    if task.s == 0:
        raise ContractViolation("schedule needs a nonempty support")
    if n < 2:
        raise ContractViolation(f"schedule needs n >= 2, got {n}")
    if not 0 < delta < 1:
        raise ContractViolation(f"delta must lie in (0, 1), got {delta}")
    r = task.w_star * task.cov_diag
    beta = float(np.min(np.abs(r[list(task.support)])))
    rsr = r * task.cov_diag * r
    eta = 1.0 / (2.0 * max(float(rsr.max()), 1e-6))
    log_term = math.log(task.d / delta)
    sig2 = task.noise_std**2
    rate = sig2 * rsr.sum() * log_term / n + sig2 * task.s * task.cov_diag.sum() * log_term**2 / n**2
    target = math.inf if rate == 0 else 1.0 / (beta * math.sqrt(rate))
    if target / eta >= T_CEILING:
        return ScheduleSuggestion(eta, T_CEILING, beta, target, True)
    return ScheduleSuggestion(eta, max(1, math.ceil(target / eta)), beta, target, False)


def _solver_risk(solver, x, y, task, eta, t):
    try:
        if solver == "raw_gd":
            return excess_risk_raw(gd_solve(x, y, eta, t).final, task)
        traj = pre_gd_solve(x, y, eta, t)
        return excess_risk_pre(traj.final, traj.r_hat, task)
    except DivergenceError:
        return math.inf


def tune_learning_rate(solver, instances, t, grid=ETA_GRID):
    """Pick the grid step size with the lowest mean closed-form excess risk at step t.

    ``instances`` is a ``(dataset, task)`` pair or a list of them. Divergent
    or non-finite risks are never selected; ties go to the larger step size.
    Returns ``(eta_best, mean_risk)``, or ``(None, inf)`` if every grid point diverges.
    """
    if solver not in ("raw_gd", "pre_gd"):
        raise ContractViolation(f"unknown solver {solver!r}")
    grid = list(grid)
    if not grid:
        raise ContractViolation("learning-rate grid is empty")
    if isinstance(instances, tuple):
        instances = [instances]
    best_eta, best_risk = None, math.inf
    for eta in grid:
        risks = [_solver_risk(solver, *data.examples, task, eta, t) for data, task in instances]
        mean = float(np.mean(risks))
        if not math.isfinite(mean):
            continue
        if best_eta is None or mean < best_risk or (mean == best_risk and eta > best_eta):
            best_eta, best_risk = eta, mean
    return best_eta, best_risk


class _LinearModel(RegressorMixin, BaseEstimator):
    def _validate_fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        return X, y

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_


class GDRegressor(_LinearModel):
    """``n_steps`` of full-batch gradient descent from zero, no intercept."""

    def __init__(self, eta=0.1, n_steps=64):
        self.eta = eta
        self.n_steps = n_steps

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        self.trajectory_ = gd_solve(X, y, self.eta, self.n_steps)
        self.coef_ = self.trajectory_.coef()
        return self


class PreGDRegressor(_LinearModel):
    """Correlation reweighting followed by gradient descent.

    ``coef_`` is expressed in the raw feature space (``r_hat_ * w``), so
    ``predict`` takes unprocessed features.
    """

    def __init__(self, eta=0.1, n_steps=64):
        self.eta = eta
        self.n_steps = n_steps

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        self.trajectory_ = pre_gd_solve(X, y, self.eta, self.n_steps)
        self.r_hat_ = self.trajectory_.r_hat
        self.coef_ = self.trajectory_.coef()
        return self


class RidgeClosedForm(_LinearModel):
    def __init__(self, lam=1e-2):
        self.lam = lam

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        self.coef_ = ridge_solve(X, y, self.lam)
        return self


class MinNormOLS(_LinearModel):
    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        self.coef_ = ols_solve(X, y)
        return self


class LassoCD(_LinearModel):
    def __init__(self, alpha=1e-2, max_sweeps=1000, tol=1e-8):
        self.alpha = alpha
        self.max_sweeps = max_sweeps
        self.tol = tol

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        res = lasso_cd(X, y, self.alpha, self.max_sweeps, self.tol)
        if not res.converged:
            warnings.warn(f"lasso did not converge in {res.sweeps} sweeps", RuntimeWarning)
        self.coef_ = res.coef
        self.converged_ = res.converged
        self.n_iter_ = res.sweeps
        return self
