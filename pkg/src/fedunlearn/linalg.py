"""Dense vector kernels.

Model parameters are plain 1-D ``float64`` numpy arrays. Every helper here is a
pure function; reductions run in a fixed index order so that results do not
depend on how many workers evaluated the inputs.
"""

import numpy as np

from .errors import DimensionError, WeightError

WEIGHT_SUM_TOL = 1e-12


def as_vector(v, copy=False):
    """Coerce ``v`` to a finite 1-D float64 array."""
    arr = np.array(v, dtype=np.float64, copy=copy) if copy else np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-D parameter vector, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionError("parameter vector must have positive dimension")
    if not np.all(np.isfinite(arr)):
        raise ValueError("parameter vector has non-finite entries")
    return arr


def _check_same(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


def dot(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    return float(np.dot(a, b))


def norm_sq(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.dot(a, a))


def norm(a):
    return float(np.sqrt(norm_sq(a)))


def scale(alpha, x):
    return float(alpha) * np.asarray(x, dtype=np.float64)


def axpy(alpha, x, y):
    """Return ``alpha * x + y``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same(x, y)
    if alpha == 0.0:
        return y.copy()
    return float(alpha) * x + y


def weighted_sum(vectors, weights):
    """Convex combination ``sum_k weights[k] * vectors[k]``.

    Accumulation is strictly left to right over the given order.
    """
    if len(vectors) != len(weights):
        raise DimensionError(f"{len(vectors)} vectors but {len(weights)} weights")
    if not vectors:
        raise DimensionError("weighted_sum of an empty list")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise WeightError("weights must be finite and nonnegative")
    total = 0.0
    for wk in w:
        total += wk
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise WeightError(f"weights sum to {total!r}, not 1")
    first = np.asarray(vectors[0], dtype=np.float64)
    for v in vectors[1:]:
        _check_same(first, np.asarray(v))
    acc = w[0] * first
    for wk, v in zip(w[1:], vectors[1:]):
        acc = acc + wk * np.asarray(v, dtype=np.float64)
    return acc


def projection_threshold(d):
    return 1e-14 * d


def orth_residual(h, g):
    """Component of ``h`` orthogonal to ``g``: ``h - <h,g>/<g,g> g``.

    When ``||g||^2`` is at or below ``1e-14 * d`` the projection base is treated
    as degenerate and ``h`` is returned unchanged.
    """
    h = np.asarray(h, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check_same(h, g)
    gg = norm_sq(g)
    if gg <= projection_threshold(h.shape[0]):
        return h.copy()
    return h - (dot(h, g) / gg) * g
