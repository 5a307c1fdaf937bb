"""Small numerical helpers shared by the rest of the package.

Everything here works on float64 numpy arrays. The finite-difference
routines are the reference every analytic gradient in the package is
tested against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np


class DegenerateInputError(ValueError):
    """Raised when an operation is undefined for its input (zero vector, empty set)."""


def as_float_array(x, name: str = "array") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def l2_normalize(v) -> np.ndarray:
    """Scale a vector to unit Euclidean norm.

    Raises DegenerateInputError for the zero vector, whose direction is
    undefined.
    """
    v = as_float_array(v, "v")
    if v.ndim != 1:
        raise ValueError(f"expected a rank-1 array, got shape {v.shape}")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize the zero vector")
    return v / norm


def normalize_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise unit normalization over the last axis; returns (unit, norms)."""
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero row")
    return m / norms, norms


def normalize_backward(grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Pull a gradient on u = v/|v| back to v, row-wise over the last axis."""
    radial = np.sum(grad_unit * unit, axis=-1, keepdims=True)
    return (grad_unit - unit * radial) / norms


def log_sum_exp(xs) -> float:
    """log(sum(exp(xs))) evaluated with the max subtracted first."""
    xs = as_float_array(xs, "xs").ravel()
    if xs.size == 0:
        raise ValueError("log_sum_exp of an empty array")
    m = xs.max()
    return float(m + np.log(np.sum(np.exp(xs - m))))


def log_sum_exp_rows(m: np.ndarray) -> np.ndarray:
    """Stable log-sum-exp over the last axis of a 2-d array."""
    top = m.max(axis=-1, keepdims=True)
    return (top + np.log(np.sum(np.exp(m - top), axis=-1, keepdims=True)))[..., 0]


def softmax_rows(m: np.ndarray) -> np.ndarray:
    top = m.max(axis=-1, keepdims=True)
    e = np.exp(m - top)
    return e / e.sum(axis=-1, keepdims=True)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Parameters
    ----------
    f : callable
        Maps an array shaped like ``x`` to a float.
    x : array_like
        Evaluation point; not modified.
    h : float
        Step size, must be positive.

    Returns
    -------
    ndarray shaped like ``x`` holding (f(x + h e_k) - f(x - h e_k)) / 2h.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value while probing coordinate {k}")
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    probe_count: int

    def merge(self, other: "GradCheckReport") -> "GradCheckReport":
        return GradCheckReport(
            max(self.max_rel_error, other.max_rel_error),
            max(self.max_abs_error, other.max_abs_error),
            self.probe_count + other.probe_count,
        )


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm relative error between two gradient blocks.

    The difference is scaled by the larger of the two blocks' max magnitudes,
    so coordinates that are tiny relative to the block do not dominate.
    Blocks that are both below ``floor`` compare as absolute error / floor.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ValueError(f"shape mismatch {analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    diff = np.max(np.abs(analytic - numeric))
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(diff / scale)


def compare_gradients(
    analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray]
) -> GradCheckReport:
    """Relative error over the concatenation of all blocks.

    Scaling jointly keeps a block that is zero by construction (a term
    sitting exactly on the kink of an absolute value, where finite
    differences return O(h) curvature) from dividing noise by zero.
    """
    keys = list(analytic)
    if not keys:
        return GradCheckReport(0.0, 0.0, 1)
    a = np.concatenate([np.ravel(analytic[k]) for k in keys])
    n = np.concatenate([np.ravel(numeric[k]) for k in keys])
    abs_err = float(np.max(np.abs(a - n))) if a.size else 0.0
    return GradCheckReport(relative_error(a, n), abs_err, max(int(a.size), 1))
