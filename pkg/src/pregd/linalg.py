"""Small dense linear-algebra kernels and the seeded random source.

Matrices and vectors are plain float64 numpy arrays. Diagonal matrices are
stored as the 1-D array of their diagonal.
"""
from __future__ import annotations

import hashlib

import numpy as np


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class EmptySampleError(ContractViolation):
    """A statistic was requested from zero samples."""


def as_vector(v, name="vector"):
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ContractViolation(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} has non-finite entries")
    return arr


def as_matrix(m, name="matrix", allow_empty_rows=False):
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 1 or (arr.shape[0] < 1 and not allow_empty_rows):
        raise ContractViolation(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} has non-finite entries")
    return arr


def frozen(arr):
    """Return a read-only float64 copy of ``arr``."""
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def mat_vec(m, v):
    m = as_matrix(m, "m")
    v = as_vector(v, "v")
    if m.shape[1] != v.shape[0]:
        raise ContractViolation(
            f"dimension mismatch: matrix has {m.shape[1]} columns, vector has dim {v.shape[0]}"
        )
    return m @ v


def empirical_second_moment(x_rows):
    """(1/n) X^T X for the n x d design ``x_rows``."""
    x = np.asarray(x_rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptySampleError("empirical second moment needs at least one row")
    x = as_matrix(x, "x_rows")
    m = x.T @ x / x.shape[0]
    # exact symmetry regardless of summation order
    return 0.5 * (m + m.T)


def diag_apply(r, v):
    r = as_vector(r, "diagonal")
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != r.shape[0]:
        raise ContractViolation(
            f"dimension mismatch: diagonal has dim {r.shape[0]}, vector has dim {v.shape[-1]}"
        )
    return v * r


def _label_words(label):
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


class RandomSource:
    """Seeded generator with labeled, reproducible substreams.

    Backed by numpy's PCG64 bit generator; normals use numpy's ziggurat
    sampler, so a fixed seed gives the same stream on every platform for a
    given numpy release. ``split(label)`` derives an independent stream from
    ``(seed, path of labels)`` alone, never from the parent's consumed state.
    """

    def __init__(self, seed, _path=()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ContractViolation(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._path = tuple(_path)
        spawn_key = tuple(w for label in self._path for w in _label_words(label))
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=spawn_key))
        )

    def split(self, label):
        return RandomSource(self.seed, self._path + (str(label),))

    @property
    def generator(self):
        return self._gen

    def normal(self, size):
        return self._gen.standard_normal(size)

    def permutation(self, k):
        return self._gen.permutation(k)

    def signs(self, size):
        return np.where(self._gen.integers(0, 2, size=size) == 1, 1.0, -1.0)

    def __repr__(self):
        path = "/".join(self._path)
        return f"RandomSource(seed={self.seed}, path={path!r})"


def standard_normal(rng, dim):
    if int(dim) < 1:
        raise ContractViolation(f"dim must be >= 1, got {dim}")
    return rng.normal(int(dim))
