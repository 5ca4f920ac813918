"""Deterministic point sets and quadrature on unit spheres."""
from __future__ import annotations

import numpy as np

DEFAULT_SEED = 0x5717A7

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` nearly uniform points on S^2 (Fibonacci lattice)."""
    i = np.arange(n)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * _GOLDEN_ANGLE
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def circle_points(n: int, offset: float = 0.0) -> np.ndarray:
    """``n`` equally spaced points on S^1 starting at angle ``offset``."""
    t = offset + 2.0 * np.pi * np.arange(n) / n
    return np.stack([np.cos(t), np.sin(t)], axis=1)


def random_sphere(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent uniform points on S^{d-1}."""
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sphere_samples(d: int, n: int, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Deterministic sample set on S^{d-1}.

    S^0 is returned as ``{+1, -1}`` whatever ``n`` is.  Circles use equal
    angles, S^2 the Fibonacci lattice, and higher spheres seeded uniform
    sampling.
    """
    if d < 1:
        raise ValueError("sphere dimension must be positive")
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if n < 1:
        raise ValueError("need at least one sample")
    if d == 2:
        return circle_points(n)
    if d == 3:
        return fibonacci_sphere(n)
    return random_sphere(d, n, np.random.default_rng(seed))


def sphere_area(d: int) -> float:
    """Surface measure of S^{d-1} in R^d (2 for d = 1)."""
    from scipy.special import gamma

    return float(2.0 * np.pi ** (d / 2.0) / gamma(d / 2.0))


def angles_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise angles between rows of ``a`` (m, d) and ``b`` (n, d)."""
    c = np.clip(a @ b.T, -1.0, 1.0)
    return np.arccos(c)


def orthonormal_complement(w: np.ndarray) -> np.ndarray:
    """Orthonormal basis (d, d-1) of the hyperplane orthogonal to unit ``w``."""
    d = w.size
    q, _ = np.linalg.qr(np.column_stack([w, np.eye(d)]))
    return q[:, 1:d]
