"""
Rescaled Laguerre functions and the rescaled Hermite operator.

The Laguerre function of degree ``k`` on ``R^{2m}`` with frequency ``lam`` is

    phi_k(z) = lam^m L_k^{m-1}(lam |z|^2 / 2) exp(-lam |z|^2 / 4),

an eigenfunction of ``H = -Delta + (lam^2 / 4) |z|^2`` with eigenvalue
``(2k + m) lam``.  Everything here is radial, so functions take
``rho2 = |z|^2`` rather than ``z``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import comb, log

import numpy as np
from scipy.special import roots_legendre

from .sphere import sphere_area

__all__ = [
    "LaguerreParams",
    "laguerre_phi",
    "laguerre_table",
    "laguerre_iter",
    "hermite_apply",
    "laguerre_norm_sq",
    "laguerre_norm_sq_exact",
]

_BIG = 1e150


@dataclass(frozen=True)
class LaguerreParams:
    k: int
    lam: float
    m: int

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 0:
            raise ValueError(f"k must be a nonnegative integer, got {self.k}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"m must be a positive integer, got {self.m}")


def laguerre_phi(params: LaguerreParams, rho2) -> np.ndarray | float:
    """Evaluate ``phi_k^{(lam, m)}`` at ``|z|^2 = rho2``.

    The three-term recurrence for ``L_k^{m-1}`` runs with per-element
    rescaling and a running log-scale, so large ``k t`` neither overflows
    nor loses the exponential damping.
    """
    k, lam, m = params.k, float(params.lam), params.m
    rho2 = np.asarray(rho2, dtype=float)
    if np.any(rho2 < 0):
        raise ValueError("rho2 must be nonnegative")
    t = 0.5 * lam * rho2
    a = m - 1.0
    prev = np.ones_like(t)
    cur = 1.0 + a - t
    logs = np.zeros_like(t)
    if k == 0:
        cur = prev
    for j in range(1, k):
        nxt = ((2 * j + 1 + a - t) * cur - (j + a) * prev) / (j + 1)
        prev, cur = cur, nxt
        big = np.abs(cur) > _BIG
        if np.any(big):
            prev = np.where(big, prev / _BIG, prev)
            cur = np.where(big, cur / _BIG, cur)
            logs = logs + np.where(big, log(_BIG), 0.0)
    with np.errstate(divide="ignore"):
        mag = np.log(np.abs(cur)) + logs - 0.5 * t + m * log(lam)
    out = np.sign(cur) * np.exp(mag)
    return float(out) if out.ndim == 0 else out


def laguerre_iter(kmax: int, lam, m: int, rho2):
    """Yield ``phi_k^{(lam, m)}(rho2)`` for ``k = 0..kmax`` one degree at a time.

    Same recurrence as :func:`laguerre_table` but holding only two degrees
    in memory.
    """
    lam = np.asarray(lam, dtype=float)
    rho2 = np.asarray(rho2, dtype=float)
    t = 0.5 * lam * rho2
    a = m - 1.0
    scale = lam ** m
    prev = np.exp(-0.5 * t)
    yield prev * scale
    if kmax < 1:
        return
    cur = (1.0 + a - t) * prev
    yield cur * scale
    for j in range(1, kmax):
        prev, cur = cur, ((2 * j + 1 + a - t) * cur - (j + a) * prev) / (j + 1)
        yield cur * scale


def laguerre_table(kmax: int, lam, m: int, rho2) -> np.ndarray:
    """All ``phi_k^{(lam, m)}(rho2)`` for ``k = 0..kmax``.

    ``lam`` and ``rho2`` broadcast; the result has shape
    ``(kmax + 1,) + broadcast shape``.  The recurrence is seeded with the
    exponential factor already applied, which keeps every term bounded.
    """
    shape = np.broadcast(np.asarray(lam), np.asarray(rho2)).shape
    out = np.empty((kmax + 1,) + shape)
    for k, v in enumerate(laguerre_iter(kmax, lam, m, rho2)):
        out[k] = v
    return out


def hermite_apply(lam: float, m: int, f: np.ndarray, h: float, radial: bool = False,
                  lo=None) -> np.ndarray:
    """Apply ``-Delta + (lam^2/4)|z|^2`` by second-order finite differences.

    Parameters
    ----------
    lam : float
        Frequency.
    m : int
        Half dimension; the operator acts on ``R^{2m}``.
    f : ndarray
        Samples.  With ``radial=False`` an array with ``2m`` axes on a
        uniform Cartesian grid of spacing ``h``; with ``radial=True`` a radial
        profile at ``r_i = i h``.  Values beyond the grid are taken as zero.
    h : float
        Grid spacing.
    lo : sequence of float, optional
        Coordinates of the first node per axis (Cartesian form).  Defaults to
        a grid centred at the origin.
    """
    f = np.asarray(f, dtype=float)
    if lam * h * h > 0.1:
        warnings.warn(f"grid spacing h={h} is coarse for lambda={lam} (lambda h^2 > 0.1)",
                      stacklevel=2)
    if radial:
        n = f.size
        r = h * np.arange(n)
        fp = np.concatenate([f, [0.0]])
        fm = np.concatenate([[f[1] if n > 1 else 0.0], f[:-1]])
        d2f = (fp[1:] - 2 * f + fm) / (h * h)
        d1f = (fp[1:] - fm) / (2 * h)
        lap = np.empty(n)
        lap[1:] = d2f[1:] + (2 * m - 1) / r[1:] * d1f[1:]
        lap[0] = 2 * m * d2f[0]
        return -lap + 0.25 * lam * lam * r * r * f
    if f.ndim != 2 * m:
        raise ValueError(f"expected {2 * m} axes, got {f.ndim}")
    if lo is None:
        lo = [-(n - 1) / 2.0 * h for n in f.shape]
    lap = -2.0 * f.ndim * f
    rho2 = np.zeros_like(f)
    for ax in range(f.ndim):
        pad = [(0, 0)] * f.ndim
        pad[ax] = (1, 1)
        fpad = np.pad(f, pad)
        sl_hi = [slice(None)] * f.ndim
        sl_lo = [slice(None)] * f.ndim
        sl_hi[ax] = slice(2, None)
        sl_lo[ax] = slice(0, -2)
        lap = lap + fpad[tuple(sl_hi)] + fpad[tuple(sl_lo)]
        c = lo[ax] + h * np.arange(f.shape[ax])
        shape = [1] * f.ndim
        shape[ax] = -1
        rho2 = rho2 + (c * c).reshape(shape)
    return -lap / (h * h) + 0.25 * lam * lam * rho2 * f


def _panel_rule(T: float, nodes: int, panels: int = 2) -> tuple[np.ndarray, np.ndarray]:
    per = max(2, nodes // panels)
    x, w = roots_legendre(per)
    edges = np.linspace(0.0, T, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    t = (mid[:, None] + half[:, None] * x).ravel()
    wt = (half[:, None] * w).ravel()
    return t, wt


def laguerre_norm_sq(params: LaguerreParams, nodes: int = 256) -> float:
    """``int_{R^{2m}} |phi_k^{(lam, m)}|^2`` by radial quadrature.

    The substitution ``t = lam |z|^2 / 2`` turns the integral into
    ``|S^{2m-1}| 2^{m-1} lam^m int_0^T t^{m-1} L_k^{m-1}(t)^2 e^{-t} dt``,
    truncated at ``T = 2 (2k + m + 40)`` and integrated by panelled
    Gauss-Legendre with ``nodes`` points in total.
    """
    k, lam, m = params.k, float(params.lam), params.m
    T = 2.0 * (2 * k + m + 40)
    t, w = _panel_rule(T, nodes)
    psi = laguerre_table(k, 1.0, m, 2.0 * t)[k]  # L_k(t) e^{-t/2}
    integral = np.sum(w * t ** (m - 1) * psi * psi)
    return float(sphere_area(2 * m) * 2.0 ** (m - 1) * lam ** m * integral)


def laguerre_norm_sq_exact(k: int, lam: float, m: int) -> float:
    """Closed form ``(2 pi)^m lam^m binom(k + m - 1, k)``."""
    return float((2 * np.pi) ** m * lam ** m * comb(k + m - 1, k))
