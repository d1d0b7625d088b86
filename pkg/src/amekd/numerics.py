"""Dense float64 helpers: stable softmax, entropy, KL and a gradient oracle."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import InvalidArgumentError, NumericFailureError

PROB_FLOOR = 1e-12
DEFAULT_FD_STEP = 1e-5


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Return ``data`` as a finite 2-D float64 array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgumentError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def as_vector(data, name: str = "vector") -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def check_prob_vector(p, name: str = "p", atol: float = 1e-9) -> np.ndarray:
    p = as_vector(p, name)
    if p.size == 0:
        raise InvalidArgumentError(f"{name} is empty")
    if np.any(p < 0) or np.any(p > 1):
        raise InvalidArgumentError(f"{name} has entries outside [0, 1]")
    if abs(p.sum() - 1.0) > atol:
        raise InvalidArgumentError(f"{name} sums to {p.sum()!r}, not 1")
    return p


def _check_temperature(temperature: float) -> float:
    t = float(temperature)
    if not np.isfinite(t) or t <= 0:
        raise InvalidArgumentError(f"temperature must be positive and finite, got {temperature!r}")
    return t


def log_softmax(logits, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Log of ``softmax(logits / temperature)`` along ``axis``."""
    t = _check_temperature(temperature)
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("logits contain non-finite values")
    z = z / t
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Temperature-scaled softmax with max subtraction.

    Works on vectors and, row-wise by default, on matrices.
    """
    t = _check_temperature(temperature)
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("logits contain non-finite values")
    z = z / t
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def entropy(p) -> float:
    """Shannon entropy in nats; zero-probability terms contribute nothing."""
    p = check_prob_vector(p)
    h = -float(np.sum(p * np.log(np.maximum(p, PROB_FLOOR))))
    # 0 <= H <= ln n holds exactly; the clamp removes round-off excursions
    return min(max(h, 0.0), float(np.log(p.size)))


def kl_div(p, q) -> float:
    """``KL(p || q)`` in nats with ``q`` floored at 1e-12."""
    p = check_prob_vector(p, "p")
    q = check_prob_vector(q, "q")
    if p.shape != q.shape:
        raise InvalidArgumentError(f"length mismatch: {p.size} vs {q.size}")
    if np.array_equal(p, q):
        return 0.0
    mask = p > 0
    val = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], PROB_FLOOR)))))
    return max(val, 0.0)


def cosine_sim(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise InvalidArgumentError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidArgumentError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise InvalidArgumentError("cannot normalize a zero row")
    return x / norms


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise InvalidArgumentError(f"column mismatch: {a.shape[1]} vs {b.shape[1]}")
    return np.clip(normalize_rows(a) @ normalize_rows(b).T, -1.0, 1.0)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, h: float = DEFAULT_FD_STEP
) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``."""
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = f(x.copy())
        x[i] = orig - h
        fm = f(x.copy())
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericFailureError(f"non-finite function value perturbing component {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)`` (0 if both vanish)."""
    a = np.ravel(a)
    b = np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
