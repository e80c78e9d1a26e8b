"""Dense float64 matrix helpers: row indexing and the two norms used everywhere.

Everything here is 64-bit; the drift and perturbation certificates keep
ratios of these norms, so 32-bit noise would leak straight into reported
constants.
"""

import math

import numpy as np

POWER_ITER_SEED = 0x5EEDC0DE  # fixed, so repeated calls are bit-identical
POWER_ITER_MAX_STEPS = 500
POWER_ITER_RTOL = 1e-10


def as_matrix(values) -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.size and not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def row_index_set(indices, rows: int) -> np.ndarray:
    """Sorted, duplicate-free row indices validated against a row count."""
    idx = np.array(sorted({int(i) for i in indices}), dtype=np.int64)
    if idx.size and (idx[0] < 0 or idx[-1] >= rows):
        raise IndexError(f"row index out of range for {rows} rows")
    return idx


def row_submatrix(m, indices) -> np.ndarray:
    """Select rows of ``m`` in ascending index order (copy)."""
    a = as_matrix(m)
    idx = row_index_set(indices, a.shape[0])
    return a[idx].copy()


def frobenius_norm(m) -> float:
    """sqrt of the sum of squared entries."""
    a = as_matrix(m)
    return float(math.sqrt(float(np.sum(a * a))))


def spectral_norm(m) -> float:
    """Largest singular value via power iteration on m^T m.

    The start vector is drawn from a fixed seed so repeated calls on the
    same matrix return bit-identical values. Iteration stops when the
    successive estimate changes by a relative factor below 1e-10, or after
    500 steps. A zero (or empty) matrix returns exactly 0.0. Repeated top
    singular values are fine: the iteration converges to the shared value.
    """
    a = as_matrix(m)
    if a.size == 0:
        return 0.0
    rng = np.random.default_rng(POWER_ITER_SEED)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(POWER_ITER_MAX_STEPS):
        w = a @ v
        new_sigma = float(np.linalg.norm(w))
        if new_sigma == 0.0:
            return 0.0
        u = a.T @ w
        norm_u = np.linalg.norm(u)
        if norm_u == 0.0:
            return 0.0
        v = u / norm_u
        if abs(new_sigma - sigma) < POWER_ITER_RTOL * new_sigma:
            return new_sigma
        sigma = new_sigma
    return sigma
