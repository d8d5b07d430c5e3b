"""Sparse linear regression tasks, in-context datasets and prompt matrices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ContractViolation, RandomSource, as_matrix, as_vector, frozen

PRIORS = ("gaussian_then_sparsify", "rademacher_over_sqrt_s")


@dataclass(frozen=True)
class SparseLinearTask:
    """Ground truth ``w_star`` with diagonal feature covariance and noise level."""

    w_star: np.ndarray
    cov_diag: np.ndarray
    noise_std: float
    support: tuple

    def __post_init__(self):
        w = as_vector(self.w_star, "w_star")
        cov = as_vector(self.cov_diag, "cov_diag")
        if cov.shape != w.shape:
            raise ContractViolation(f"covariance dim {cov.shape[0]} != weight dim {w.shape[0]}")
        if np.any(cov < 0):
            raise ContractViolation("covariance diagonal must be nonnegative")
        if not (self.noise_std >= 0):
            raise ContractViolation(f"noise_std must be >= 0, got {self.noise_std}")
        support = tuple(sorted(int(j) for j in self.support))
        if len(set(support)) != len(support) or any(not 0 <= j < w.shape[0] for j in support):
            raise ContractViolation(f"invalid support {support} for dim {w.shape[0]}")
        off = np.ones(w.shape[0], dtype=bool)
        off[list(support)] = False
        if np.any(w[off] != 0):
            raise ContractViolation("w_star is nonzero outside its support")
        object.__setattr__(self, "w_star", frozen(w))
        object.__setattr__(self, "cov_diag", frozen(cov))
        object.__setattr__(self, "noise_std", float(self.noise_std))
        object.__setattr__(self, "support", support)

    @property
    def d(self):
        return self.w_star.shape[0]

    @property
    def s(self):
        return len(self.support)

    @classmethod
    def from_weights(cls, w_star, cov_diag=None, noise_std=0.0):
        w = as_vector(w_star, "w_star")
        cov = np.ones_like(w) if cov_diag is None else cov_diag
        return cls(w, cov, noise_std, tuple(np.flatnonzero(w)))


@dataclass(frozen=True)
class InContextDataset:
    """``n`` labelled examples and ``q`` queries.

    Query labels are stored for evaluation only; estimators receive
    ``dataset.examples`` and never see them.
    """

    x: np.ndarray
    y: np.ndarray
    query_x: np.ndarray
    query_y_true: np.ndarray

    def __post_init__(self):
        x = as_matrix(self.x, "x")
        y = as_vector(self.y, "y")
        qx = as_matrix(self.query_x, "query_x")
        qy = as_vector(self.query_y_true, "query_y_true")
        if y.shape[0] != x.shape[0]:
            raise ContractViolation(f"{x.shape[0]} examples but {y.shape[0]} labels")
        if qy.shape[0] != qx.shape[0]:
            raise ContractViolation(f"{qx.shape[0]} queries but {qy.shape[0]} labels")
        if qx.shape[1] != x.shape[1]:
            raise ContractViolation(f"query dim {qx.shape[1]} != example dim {x.shape[1]}")
        for name, arr in (("x", x), ("y", y), ("query_x", qx), ("query_y_true", qy)):
            object.__setattr__(self, name, frozen(arr))

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def q(self):
        return self.query_x.shape[0]

    @property
    def d(self):
        return self.x.shape[1]

    @property
    def examples(self):
        return self.x, self.y


@dataclass(frozen=True)
class PromptMatrix:
    """The (d+1) x (n+q) prompt: example columns (x_i; y_i), query columns (x; 0)."""

    entries: np.ndarray
    n: int
    q: int

    def __post_init__(self):
        e = as_matrix(self.entries, "entries")
        if e.shape[1] != self.n + self.q:
            raise ContractViolation(f"prompt has {e.shape[1]} columns, expected n+q={self.n + self.q}")
        if np.any(e[-1, self.n:] != 0):
            raise ContractViolation("query label slots must be zero")
        object.__setattr__(self, "entries", frozen(e))

    @property
    def d(self):
        return self.entries.shape[0] - 1

    def read_examples(self):
        return self.entries[:-1, :self.n].T.copy(), self.entries[-1, :self.n].copy()

    def read_queries(self):
        return self.entries[:-1, self.n:].T.copy()


def sample_task(d, s, cov_diag, noise_std, prior, rng):
    """Draw a uniformly supported s-sparse task.

    ``gaussian_then_sparsify`` keeps N(0,1) weights on the support;
    ``rademacher_over_sqrt_s`` sets them to +-1/sqrt(s), so ``||w*|| = 1``.
    """
    d, s = int(d), int(s)
    if not 1 <= s <= d:
        raise ContractViolation(f"need 1 <= s <= d, got s={s}, d={d}")
    if prior not in PRIORS:
        raise ContractViolation(f"unknown prior {prior!r}; expected one of {PRIORS}")
    cov = np.broadcast_to(np.asarray(cov_diag, dtype=np.float64), (d,)).copy()
    support = np.sort(rng.split("support").permutation(d)[:s])
    w = np.zeros(d)
    weights = rng.split("weights")
    if prior == "gaussian_then_sparsify":
        w[support] = weights.normal(s)
    else:
        w[support] = weights.signs(s) / np.sqrt(s)
    return SparseLinearTask(w, cov, noise_std, tuple(support))


def sample_dataset(task, n, q, rng):
    """Sample n examples and q queries; returns ``(dataset, example_noise)``."""
    n, q = int(n), int(q)
    if n < 1 or q < 1:
        raise ContractViolation(f"need n >= 1 and q >= 1, got n={n}, q={q}")
    scale = np.sqrt(task.cov_diag)
    z = rng.split("features").normal((n + q, task.d))
    x = z * scale
    eps = task.noise_std * rng.split("noise").normal(n + q)
    y = x @ task.w_star + eps
    data = InContextDataset(x[:n], y[:n], x[n:], y[n:])
    return data, frozen(eps[:n])


def build_prompt(data):
    e = np.zeros((data.d + 1, data.n + data.q))
    e[:-1, :data.n] = data.x.T
    e[-1, :data.n] = data.y
    e[:-1, data.n:] = data.query_x.T
    return PromptMatrix(e, data.n, data.q)


def _check_dim(w, task, name):
    w = as_vector(w, name)
    if w.shape[0] != task.d:
        raise ContractViolation(f"dimension mismatch: {name} has dim {w.shape[0]}, task has d={task.d}")
    return w


def excess_risk_raw(w, task):
    """Population excess risk (w - w*)^T Sigma (w - w*)."""
    diff = _check_dim(w, task, "w") - task.w_star
    return float(np.sum(task.cov_diag * diff * diff))


def excess_risk_pre(w_tilde, r_hat, task):
    """Excess risk of the predictor x -> <R_hat x, w_tilde>."""
    w_tilde = _check_dim(w_tilde, task, "w_tilde")
    r_hat = _check_dim(r_hat, task, "r_hat")
    return excess_risk_raw(r_hat * w_tilde, task)
