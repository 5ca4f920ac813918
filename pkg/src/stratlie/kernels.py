"""
Localizers and convolution kernels of spectral multipliers.

The kernel of ``F(L) chi(2^l U) zeta_j(U)`` is synthesized from its partial
Fourier transform in the central variable.  For a central frequency ``mu``
with spectral data ``(b_n, P_n, P_0)`` the fiber function is

    Kt(x, mu) = c(mu) (2 pi)^(-r0 - |r|)
                * sum_k  G(eta_k, |P_0 x|) prod_n phi_{k_n}^{(b_n, r_n)}(|P_n x|^2),

with ``eta_k = sum_n (2 k_n + r_n) b_n``, ``c(mu) = chi(2^l |mu|) zeta_j(mu)``
and ``G(eta, v) = int_{ker J_mu} F(|xi|^2 + eta) exp(i xi . w) dxi`` for any
``|w| = v``.  The kernel itself is

    K(x, u) = (2 pi)^(-d2) int Kt(x, mu) exp(i mu . u) dmu .

The ``k`` sum is finite and exact because ``F`` vanishes beyond ``max A``.
"""
from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import gamma, jv, roots_legendre

from ._parallel import chunk_bounds, parallel_map
from .group import Grid, GridFunction, TwoStepGroup
from .spectral import TOL_CLUSTER, SpectralDecomposition, spectral_decompose
from .specfun import laguerre_iter, laguerre_table
from .sphere import (
    DEFAULT_SEED,
    angles_between,
    circle_points,
    fibonacci_sphere,
    orthonormal_complement,
    random_sphere,
    sphere_area,
    sphere_samples,
)

__all__ = [
    "FFTPlan",
    "NodeSet",
    "smooth_step",
    "bump",
    "Multiplier",
    "ScalePartition",
    "CapPartition",
    "QuadratureSpec",
    "KernelSample",
    "KernelEvaluator",
    "dyadic_multiplier_pieces",
    "cap_partition",
    "eigvp",
    "min_scale_ell0",
    "evaluate_kernel",
    "sphere_rule",
    "radial_profile_integral",
]


# ----------------------------------------------------------------------------
# smooth profiles


def _expinv(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos])
    return out


def smooth_step(t):
    """Smooth ``eta`` with ``eta = 1`` on ``[0, 1]`` and ``eta = 0`` on ``[2, inf)``."""
    t = np.abs(np.asarray(t, dtype=float))
    a = _expinv(2.0 - t)
    b = _expinv(t - 1.0)
    return a / (a + b)


def bump(t):
    """``exp(1 - 1/(1 - t^2))`` on ``|t| < 1``, zero elsewhere; peak value 1."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - t[inside] ** 2))
    return out


# ----------------------------------------------------------------------------
# multipliers


class Multiplier:
    """A bounded function ``F`` on ``[0, inf)`` vanishing outside ``support``.

    Parameters
    ----------
    func : callable
        Vectorized evaluation.
    support : (float, float)
        Closed interval ``A`` outside of which ``F`` is set to zero.
    smooth : bool
        True for smooth compactly supported profiles, False for piecewise.
    name : str
        Identifier recorded in report metadata.
    real : bool
        Whether ``func`` is real-valued.
    """

    def __init__(self, func: Callable, support: tuple[float, float], smooth: bool = True,
                 name: str = "", real: bool = True):
        lo, hi = float(support[0]), float(support[1])
        if not (0 <= lo < hi):
            raise ValueError(f"support must be an interval in [0, inf), got {support}")
        self._func = func
        self.support = (lo, hi)
        self.smooth = smooth
        self.name = name
        self.real = real

    def __call__(self, lam):
        lam = np.asarray(lam, dtype=float)
        vals = np.asarray(self._func(lam), dtype=float if self.real else complex)
        vals = np.broadcast_to(vals, lam.shape).copy()
        vals[(lam < self.support[0]) | (lam > self.support[1])] = 0
        return vals

    @property
    def max_support(self) -> float:
        return self.support[1]

    @classmethod
    def canonical_bump(cls, a: float = 0.5, b: float = 2.0) -> "Multiplier":
        """The normalized bump on ``[a, b]``."""
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        return cls(lambda lam: bump((lam - mid) / half), (a, b), True, f"bump[{a:g},{b:g}]")

    @classmethod
    def zero(cls, support=(0.5, 2.0)) -> "Multiplier":
        return cls(lambda lam: np.zeros_like(lam), support, True, "zero")

    @classmethod
    def from_samples(cls, t, values, support=None, name: str = "samples") -> "Multiplier":
        """Cubic-spline multiplier through samples ``(t, values)``."""
        t = np.asarray(t, dtype=float)
        values = np.asarray(values)
        real = not np.iscomplexobj(values)
        spline = CubicSpline(t, values, extrapolate=False)
        if support is None:
            support = (max(0.0, float(t[0])), float(t[-1]))

        def f(lam):
            out = spline(lam)
            return np.nan_to_num(out)

        return cls(f, support, True, name, real)

    def scaled(self, a: float, b: float = 0.0) -> "Multiplier":
        """``lam -> a F(lam) + b`` on the same support (for linearity checks)."""
        return Multiplier(lambda lam: a * self._func(lam) + b, self.support, self.smooth,
                          f"{a:g}*{self.name}", self.real and np.isrealobj(a))

    def __add__(self, other: "Multiplier") -> "Multiplier":
        lo = min(self.support[0], other.support[0])
        hi = max(self.support[1], other.support[1])
        return Multiplier(lambda lam: self(lam) + other(lam), (lo, hi),
                          self.smooth and other.smooth, f"{self.name}+{other.name}",
                          self.real and other.real)

    def l2_norm(self, n: int = 20001) -> float:
        lam = np.linspace(self.support[0], self.support[1], n)
        v = np.abs(self(lam)) ** 2
        return float(np.sqrt(np.trapezoid(v, lam)))


class DyadicPiece(Multiplier):
    """One band-limited piece ``F^(iota)`` on a periodic sample grid."""

    def __init__(self, iota: int, t: np.ndarray, values: np.ndarray, name: str):
        self.iota = iota
        self.t = t
        self.values = values
        self._spline = CubicSpline(t, values, extrapolate=False)
        super().__init__(lambda s: np.nan_to_num(self._spline(np.abs(s))),
                         (0.0, float(t[-1])), True, name, not np.iscomplexobj(values))

    def sqrt_multiplier(self, lam_max: float) -> Multiplier:
        """``lam -> F^(iota)(sqrt(lam))`` truncated to ``[0, lam_max]``."""
        return Multiplier(lambda lam: self(np.sqrt(lam)), (0.0, lam_max), True,
                          f"{self.name}(sqrt)", self.real)


class ScalePartition:
    """Dyadic partition ``chi(t) = phi(t) - phi(2t)`` with ``sum_l chi(2^l t) = 1``.

    ``phi`` is the smooth step (1 on ``[0, 1]``, 0 beyond 2) so that
    ``chi`` is supported in ``[1/2, 2]`` and the dyadic sum telescopes.
    """

    lo = 0.5
    hi = 2.0

    def phi(self, t):
        return smooth_step(t)

    def chi(self, t):
        t = np.asarray(t, dtype=float)
        return self.phi(t) - self.phi(2.0 * t)

    def chi_l(self, ell: int, t):
        return self.chi(2.0 ** ell * np.asarray(t, dtype=float))

    def band(self, j: int, tau):
        """Frequency band ``chi_j``: ``phi(2 tau)`` for ``j = -1``, else ``chi(2^-j tau)``."""
        tau = np.abs(np.asarray(tau, dtype=float))
        if j == -1:
            return self.phi(2.0 * tau)
        if j < -1:
            raise ValueError("band index must be >= -1")
        return self.chi(tau / 2.0 ** j)

    def bands_for(self, t) -> range:
        """Indices ``l`` with ``chi(2^l t) != 0`` for some ``t`` in the array."""
        t = np.asarray(t, dtype=float)
        lo = int(np.floor(-np.log2(t.max() / self.lo))) - 1
        hi = int(np.ceil(-np.log2(t.min() / self.hi))) + 1
        return range(lo, hi + 1)


def dyadic_multiplier_pieces(F: Multiplier, iota_max: int, half_width: float = 16.0,
                             chi: ScalePartition | None = None,
                             support_tol: float = 1e-12) -> list[DyadicPiece]:
    """Band-pass ``F`` (extended evenly to ``R``) into dyadic frequency pieces.

    ``F`` is sampled on ``[-T, T)`` with ``T = half_width``.  The grid spacing
    is chosen so the sampled spectrum lies in ``|tau| <= 2^iota_max``, where
    the bands ``chi_{-1}, ..., chi_{iota_max}`` sum to one; the pieces then
    reconstruct the samples to rounding error.

    Returns
    -------
    list of DyadicPiece
        ``F^(-1), F^(0), ..., F^(iota_max)``.
    """
    chi = chi or ScalePartition()
    if iota_max < 0:
        raise ValueError("iota_max must be nonnegative")
    n = 2 ** int(np.floor(np.log2(2 * half_width * 2.0 ** iota_max / np.pi)))
    if n < 16:
        raise ValueError("half_width too small for the requested number of bands")
    dt = 2 * half_width / n
    t = -half_width + dt * np.arange(n)
    vals = F(np.abs(t))
    scale = max(1.0, float(np.max(np.abs(vals))))
    at = np.abs(t)
    outside = (at > 0) & ((at < 0.5) | (at > 2.0))
    if np.any(np.abs(vals[outside]) > support_tol * scale):
        raise ValueError("F must vanish outside [1/2, 2] (evenly extended)")
    spec = np.fft.fft(vals)
    tau = 2 * np.pi * np.fft.fftfreq(n, dt)
    pieces = []
    half = t >= 0
    for j in range(-1, iota_max + 1):
        piece = np.fft.ifft(spec * chi.band(j, tau))
        piece = piece.real if np.isrealobj(vals) else piece
        pieces.append(DyadicPiece(j, t[half], piece[half], f"{F.name}^({j})"))
        pieces[-1].full_t = t
        pieces[-1].full_values = piece
    return pieces


# ----------------------------------------------------------------------------
# cap partitions


class CapPartition:
    """Smooth partition of unity on ``S^{d2-1}`` by caps of angular size ``delta``."""

    def __init__(self, d2: int, delta: float, centers: np.ndarray):
        self.d2 = int(d2)
        self.delta = float(delta)
        self.centers = np.asarray(centers, dtype=float)
        self.centers.setflags(write=False)

    def __len__(self) -> int:
        return self.centers.shape[0]

    def _unit(self, omega) -> np.ndarray:
        omega = np.atleast_2d(np.asarray(omega, dtype=float))
        nrm = np.linalg.norm(omega, axis=1, keepdims=True)
        if np.any(nrm == 0):
            raise ValueError("zeta is undefined at the origin")
        return omega / nrm

    def raw(self, omega) -> np.ndarray:
        """Unnormalized bumps ``beta_j``, shape ``(m, J)``."""
        ang = angles_between(self._unit(omega), self.centers)
        return smooth_step(ang / self.delta)

    def zeta(self, omega, j=None) -> np.ndarray:
        """``zeta_j(omega)`` for ``j`` an index, a sequence of indices, or None (all).

        With a sequence the selected functions are summed; with None the
        full matrix ``(m, J)`` is returned.
        """
        beta = self.raw(omega)
        z = beta / beta.sum(axis=1, keepdims=True)
        if j is None:
            return z
        if isinstance(j, (int, np.integer)):
            return z[:, int(j)]
        return z[:, list(j)].sum(axis=1)

    def antipode(self, j: int) -> int | None:
        d = np.linalg.norm(self.centers + self.centers[j], axis=1)
        k = int(np.argmin(d))
        return k if d[k] < 1e-9 else None

    @property
    def support_angle(self) -> float:
        return 2.0 * self.delta


def _covering_radius(centers: np.ndarray, test: np.ndarray) -> float:
    best = np.full(test.shape[0], np.pi)
    for a in range(0, centers.shape[0], 512):
        ang = angles_between(test, centers[a:a + 512])
        best = np.minimum(best, ang.min(axis=1))
    return float(best.max())


def cap_partition(d2: int, delta: float, seed: int = DEFAULT_SEED) -> CapPartition:
    """Cap partition of unity with centers covering the sphere at radius ``delta``.

    Circles use ``ceil(2 pi / delta)`` equally spaced centers and S^2 a
    Fibonacci lattice of about ``4 pi / delta^2`` points, grown until every
    test direction is within ``delta`` of a center.  Higher spheres take a
    greedy cover of a seeded random test set.  ``delta >= pi`` gives the single trivial
    cap.
    """
    if not (0 < delta):
        raise ValueError("delta must be positive")
    if delta >= np.pi:
        c = np.zeros((1, d2))
        c[0, 0] = 1.0
        return CapPartition(d2, min(delta, np.pi), c)
    if d2 == 1:
        return CapPartition(1, delta, np.array([[1.0], [-1.0]]))
    if d2 == 2:
        n = int(np.ceil(2 * np.pi / delta - 1e-9))
        return CapPartition(2, delta, circle_points(n))
    if d2 == 3:
        n0 = int(np.ceil(4 * np.pi / delta ** 2))
        test = fibonacci_sphere(20000)
        n = n0
        while n <= 10 * n0:
            centers = fibonacci_sphere(n)
            if _covering_radius(centers, test) <= delta:
                return CapPartition(d2, delta, centers)
            n = int(np.ceil(1.1 * n))
    else:
        # greedy: any test direction farther than delta from all centers becomes one
        test = random_sphere(d2, 20000, np.random.default_rng(seed))
        cos_d = np.cos(delta)
        centers = [test[0]]
        best = test @ test[0]
        while True:
            i = int(np.argmin(best))
            if best[i] >= cos_d:
                return CapPartition(d2, delta, np.array(centers))
            centers.append(test[i])
            best = np.maximum(best, test @ test[i])
    raise RuntimeError(f"could not cover S^{d2 - 1} at delta={delta} with {10 * n0} caps")


# ----------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureSpec:
    """Node counts: ``radial`` in ``|mu|``, ``sphere`` per angular dimension
    (azimuthal circles get twice as many), ``xi`` for the kernel-direction
    integral, ``grid`` points per axis for default grids."""

    radial: int = 32
    sphere: int = 32
    xi: int = 24
    grid: int = 33

    def to_dict(self) -> dict:
        return asdict(self)

    def adapted(self, rho_range: tuple[float, float], u_half: float, x_half: float,
                max_support: float, d2: int, cap_angle: float = np.pi) -> "QuadratureSpec":
        """Raise node counts so the rule resolves ``exp(i mu . u)`` on a grid.

        ``u_half`` and ``x_half`` are the largest ``|u|`` and ``|x|`` on the
        grid; ``cap_angle`` the angular radius of the integration region.
        The angular count covers the phase ``mu . u`` and the rotation of the
        spectral frames seen from ``|x|``.
        """
        lo, hi = rho_range
        radial = max(self.radial, int(np.ceil((hi - lo) * u_half / 2)) + 16)
        sphere = self.sphere
        if d2 > 1:
            frac = min(cap_angle, np.pi) / np.pi
            need = frac * (hi * u_half + 2 * np.sqrt(max_support) * x_half) + 16
            sphere = max(sphere, int(np.ceil(need / (2 if (d2 == 2 and frac >= 1) else 1))))
        return QuadratureSpec(radial, sphere, self.xi, self.grid)

    @classmethod
    def from_json(cls, text: str) -> "QuadratureSpec":
        doc = json.loads(text)
        unknown = set(doc) - {"radial", "sphere", "xi", "grid"}
        if unknown:
            raise ValueError(f"unknown quadrature keys {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in doc.items()})


def _gl(a: float, b: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = roots_legendre(n)
    h = 0.5 * (b - a)
    return 0.5 * (a + b) + h * x, h * w


def sphere_rule(d: int, n: int, center=None, cap: float = np.pi) -> tuple[np.ndarray, np.ndarray]:
    """Product quadrature on ``S^{d-1}`` or on the cap of angular radius ``cap``.

    The polar angle from ``center`` (default the last axis) uses
    Gauss-Legendre with the ``sin^{d-2}`` Jacobian; the remaining
    ``S^{d-2}`` factor recurses, ending in equally spaced circles with ``2n``
    points.  Full-sphere rules are symmetric under ``omega -> -omega``.
    """
    if d == 1:
        if center is None or cap >= np.pi:
            return np.array([[1.0], [-1.0]]), np.ones(2)
        return np.array([[float(np.sign(np.ravel(center)[0]))]]), np.ones(1)
    if d == 2:
        if cap >= np.pi:
            m = 2 * n
            return circle_points(m), np.full(m, 2 * np.pi / m)
        c = np.ravel(center)
        base = math.atan2(c[1], c[0])
        th, w = _gl(-cap, cap, n)
        th = base + th
        return np.stack([np.cos(th), np.sin(th)], axis=1), w
    if center is None:
        center = np.zeros(d)
        center[-1] = 1.0
    center = np.asarray(center, dtype=float)
    center = center / np.linalg.norm(center)
    frame = orthonormal_complement(center)
    top = min(cap, np.pi)
    th, wth = _gl(0.0, top, n)
    sub, wsub = sphere_rule(d - 1, n)
    pts = (np.cos(th)[:, None, None] * center
           + np.sin(th)[:, None, None] * (sub @ frame.T)[None])
    wts = (wth * np.sin(th) ** (d - 2))[:, None] * wsub[None]
    return pts.reshape(-1, d), wts.ravel()


def radial_profile_integral(g_rho2: np.ndarray, rho: np.ndarray, w: np.ndarray,
                            r0: int, v: np.ndarray) -> np.ndarray:
    """``int_{R^r0} g(|xi|^2) exp(i xi . w) dxi`` for ``|w| = v`` from a radial rule.

    ``g_rho2`` holds ``g(rho^2)`` at the nodes ``rho`` with weights ``w``.
    """
    nu = r0 / 2.0 - 1.0
    z = np.multiply.outer(v, rho)
    if r0 == 1:
        lam = np.cos(z)
    elif r0 == 3:
        with np.errstate(invalid="ignore", divide="ignore"):
            lam = np.where(z == 0, 1.0, np.sin(z) / np.where(z == 0, 1.0, z))
    else:
        with np.errstate(invalid="ignore", divide="ignore"):
            zz = np.where(z == 0, 1.0, z)
            lam = np.where(z == 0, 1.0, gamma(nu + 1) * (2.0 / zz) ** nu * jv(nu, zz))
    return sphere_area(r0) * (lam * (g_rho2 * rho ** (r0 - 1) * w)).sum(axis=-1)


def _catmull_rom(t: np.ndarray) -> tuple[np.ndarray, ...]:
    t2, t3 = t * t, t * t * t
    return (0.5 * (-t3 + 2 * t2 - t), 0.5 * (3 * t3 - 5 * t2 + 2),
            0.5 * (-3 * t3 + 4 * t2 + t), 0.5 * (t3 - t2))


class _KernelDirectionTable:
    """Tabulated ``G(eta, v)`` with bicubic (Catmull-Rom) interpolation."""

    def __init__(self, F: Multiplier, r0: int, vmax: float, n_xi: int):
        self.r0 = r0
        lo, hi = F.support
        self.eta_max = hi
        n_eta = int(min(8192, max(1024, np.ceil(hi / 0.01))))
        self.heta = hi / n_eta
        self.eta0 = -2 * self.heta
        etas = self.eta0 + self.heta * np.arange(n_eta + 5)
        kmax_freq = np.sqrt(hi)
        self.hv = min(0.05, 0.25 / max(kmax_freq, 1e-9))
        n_v = int(np.ceil(vmax / self.hv)) + 4
        self.vmax = (n_v - 4) * self.hv
        vs = self.hv * (np.arange(n_v + 1) - 1)  # one reflected node at -hv
        # nodes enough to resolve cos(rho v) for rho <= sqrt(max A)
        n_xi = max(n_xi, int(np.ceil(np.sqrt(hi) * self.vmax / 2.0)) + 16)
        self.n_xi = n_xi
        x, w = roots_legendre(n_xi)
        dtype = float if F.real else complex
        table = np.zeros((etas.size, vs.size), dtype=dtype)
        for i, eta in enumerate(etas):
            a = np.sqrt(max(0.0, lo - eta))
            b2 = hi - eta
            if b2 <= 0:
                continue
            b = np.sqrt(b2)
            if b <= a:
                continue
            rho = 0.5 * (a + b) + 0.5 * (b - a) * x
            wt = 0.5 * (b - a) * w
            gvals = F(rho * rho + eta)
            if not np.any(gvals):
                continue
            table[i] = radial_profile_integral(gvals, rho, wt, r0, np.abs(vs))
        self.table = table
        self.etas = etas
        self.vs = vs

    def rows(self, eta: np.ndarray) -> np.ndarray:
        """Interpolate along ``eta``; returns ``eta.shape + (n_v,)``."""
        f = (eta - self.eta0) / self.heta
        f = np.where(np.isfinite(f), np.clip(f, -1.0, self.etas.size + 1.0), -1.0)
        i = np.floor(f).astype(np.int64)
        t = f - i
        out = np.zeros(eta.shape + (self.vs.size,), dtype=self.table.dtype)
        ok = (i >= 1) & (i + 2 < self.etas.size)
        if np.any(ok):
            ws = _catmull_rom(t[ok])
            ii = i[ok]
            acc = ws[0][:, None] * self.table[ii - 1]
            for a in range(1, 4):
                acc = acc + ws[a][:, None] * self.table[ii - 1 + a]
            out[ok] = acc
        return out

    def lookup(self, rows: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``rows`` (c, n_v) and ``v`` (c, n_x) -> (c, n_x)."""
        if v.size and v.max() > self.vmax:
            raise ValueError(f"|P0 x| = {v.max():.3g} beyond tabulated range {self.vmax:.3g}")
        f = v / self.hv + 1.0
        i = np.floor(f).astype(np.int64)
        ws = _catmull_rom(f - i)
        out = ws[0] * np.take_along_axis(rows, np.clip(i - 1, 0, self.vs.size - 1), axis=1)
        for a in range(1, 4):
            idx = np.clip(i - 1 + a, 0, self.vs.size - 1)
            out = out + ws[a] * np.take_along_axis(rows, idx, axis=1)
        return out


def eigvp(kvec: Sequence[int], decomp: SpectralDecomposition) -> float:
    """``eta_k = sum_n (2 k_n + r_n) b_n``."""
    kvec = list(kvec)
    if len(kvec) != decomp.N:
        raise ValueError(f"k has length {len(kvec)}, decomposition has {decomp.N} clusters")
    if any(k < 0 for k in kvec):
        raise ValueError("k must be nonnegative")
    return float(sum((2 * k + r) * b for k, r, b in zip(kvec, decomp.r, decomp.b)))


def _min_eta0(g: TwoStepGroup, samples: int = 256, tol: float = TOL_CLUSTER) -> float:
    best = np.inf
    for w in sphere_samples(g.d2, samples):
        d = spectral_decompose(g, w, tol)
        best = min(best, float(np.dot(d.r, d.b)))
    return best


def min_scale_ell0(g: TwoStepGroup, A: tuple[float, float], chi: ScalePartition | None = None,
                   samples: int = 256) -> int:
    """Smallest ``l0`` with ``F(L) chi(2^l U) = 0`` for every ``l < -l0``.

    A frequency ``|mu| = rho`` carries a nonzero term only if
    ``rho min_omega sum_n r_n b_n(omega) <= max A``, while ``chi(2^l rho)``
    needs ``rho >= 2^-l / 2``.
    """
    chi = chi or ScalePartition()
    m = _min_eta0(g, samples)
    val = np.log2(A[1] / (m * chi.lo))
    return int(np.floor(val + 1e-12))


# ----------------------------------------------------------------------------
# kernel evaluation


@dataclass
class KernelSample:
    """Kernel samples on a grid plus the metadata needed to reproduce them."""

    function: GridFunction
    metadata: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return self.function.values

    def l2_norm(self) -> float:
        return self.function.l2_norm()

    def to_csv(self, fh=None):
        return self.function.to_csv(fh)

    def metadata_json(self) -> str:
        return json.dumps(self.metadata, sort_keys=True, indent=2)


@dataclass
class NodeSet:
    """Frequencies ``mu`` with spectral frames and quadrature data.

    ``weight`` is the bare quadrature weight of ``dmu``; ``cutoff`` holds
    ``chi(2^l |mu|) zeta_j(mu)``; ``index`` gives each node's position in the
    candidate list it was built from.
    """

    mu: np.ndarray
    rho: np.ndarray
    frames: np.ndarray
    bunit: np.ndarray
    weight: np.ndarray
    cutoff: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return self.rho.size

    def subset(self, keep) -> "NodeSet":
        return NodeSet(self.mu[keep], self.rho[keep], self.frames[keep], self.bunit[keep],
                       self.weight[keep], self.cutoff[keep], self.index[keep])


def _cap_selection(cap):
    """Normalize ``cap`` to ``(partition or None, selection)``."""
    if cap is None:
        return None, None
    part, j = cap
    if part is None or len(part) == 1:
        return None, None
    if not isinstance(j, (int, np.integer)) and j is not None and len(j) == 1:
        j = int(j[0])
    return part, j


class KernelEvaluator:
    """Quadrature engine for the kernel of ``F(L) chi(2^l U) zeta_j(U)``.

    Parameters
    ----------
    g : TwoStepGroup
    F : Multiplier
    chi : ScalePartition
    ell : int or (int, int)
        Dyadic level, or an inclusive range ``(lo, hi)`` whose cutoffs are
        summed, ``sum_l chi(2^l |mu|) = phi(2^lo |mu|) - phi(2^(hi+1) |mu|)``.
    cap : (CapPartition, j) or None
        ``j`` may be an index, a sequence of indices (summed), or None for
        all caps.  None or a single trivial cap means no angular cutoff.
    quad : QuadratureSpec
    tol : float
        Clustering tolerance for the spectral decompositions.
    """

    def __init__(self, g: TwoStepGroup, F: Multiplier, chi: ScalePartition | None, ell,
                 cap=None, quad: QuadratureSpec | None = None, tol: float = TOL_CLUSTER):
        self.g = g
        self.F = F
        self.chi = chi or ScalePartition()
        if isinstance(ell, (tuple, list)):
            self.ell_range = (int(ell[0]), int(ell[1]))
            if self.ell_range[1] < self.ell_range[0]:
                raise ValueError("empty range of dyadic levels")
        else:
            self.ell_range = (int(ell), int(ell))
        self.ell = self.ell_range[0] if self.ell_range[0] == self.ell_range[1] else self.ell_range
        self.quad = quad or QuadratureSpec()
        self.tol = tol
        self.partition, self.selection = _cap_selection(cap)
        self._table = None
        probe = spectral_decompose(g, sphere_samples(g.d2, 1)[0], tol)
        self.ranks, self.r0 = probe.ranks, probe.r0
        self.r = probe.r

    @cached_property
    def nodes(self) -> NodeSet:
        """Polar quadrature nodes, built on first use."""
        return self.polar_nodes()

    # -- nodes --------------------------------------------------------------

    @property
    def rho_range(self) -> tuple[float, float]:
        """``|mu|`` interval where both the dyadic cutoff and ``F`` can be nonzero."""
        lo = 2.0 ** -self.ell_range[1] * self.chi.lo
        hi = 2.0 ** -self.ell_range[0] * self.chi.hi
        eta0 = _min_eta0(self.g, 64, self.tol)
        # nodes are tested individually below, this only trims the interval
        return lo, min(hi, self.F.max_support / eta0 * (1 + 1e-9))

    def _angular(self):
        d2, n = self.g.d2, self.quad.sphere
        part, sel = self.partition, self.selection
        if part is not None and isinstance(sel, (int, np.integer)):
            c = part.centers[int(sel)]
            return sphere_rule(d2, n, center=c, cap=min(part.support_angle, np.pi))
        return sphere_rule(d2, n)

    def radial_cutoff(self, rho) -> np.ndarray:
        """``chi(2^l rho)``, or the summed cutoff over a range of levels."""
        rho = np.asarray(rho, dtype=float)
        a, b = self.ell_range
        if a == b:
            return self.chi.chi_l(a, rho)
        return self.chi.phi(2.0 ** a * rho) - self.chi.phi(2.0 ** (b + 1) * rho)

    def angular_cutoff(self, omega) -> np.ndarray:
        """``zeta_j`` (summed over the selection), or ones without a cap."""
        omega = np.atleast_2d(omega)
        if self.partition is None:
            return np.ones(omega.shape[0])
        return self.partition.zeta(omega, self.selection)

    def cutoff_at(self, mu: np.ndarray) -> np.ndarray:
        mu = np.atleast_2d(mu)
        return self.radial_cutoff(np.linalg.norm(mu, axis=1)) * self.angular_cutoff(mu)

    def make_nodes(self, mu: np.ndarray, weight: np.ndarray) -> NodeSet:
        """Decompose at each ``mu`` and drop nodes where the integrand vanishes."""
        mu = np.atleast_2d(np.asarray(mu, dtype=float))
        weight = np.asarray(weight, dtype=float)
        rho = np.linalg.norm(mu, axis=1)
        keep = rho > 0
        cut = np.zeros(rho.size)
        cut[keep] = self.cutoff_at(mu[keep])
        keep &= (cut != 0) & (weight != 0)
        index = np.flatnonzero(keep)
        mu, rho, weight, cut = mu[keep], rho[keep], weight[keep], cut[keep]
        d1, N = self.g.d1, len(self.ranks)
        frames = np.zeros((rho.size, d1, d1))
        bunit = np.zeros((rho.size, N))
        for i, (m, r) in enumerate(zip(mu, rho)):
            d = spectral_decompose(self.g, m / r, self.tol)
            if (d.ranks, d.r0) != (self.ranks, self.r0):
                raise ValueError(
                    f"spectral structure {(d.ranks, d.r0)} at mu={m} differs from "
                    f"{(self.ranks, self.r0)}; multiplicities must be constant"
                )
            frames[i] = np.hstack(list(d.bases) + [d.kernel_basis])
            bunit[i] = d.b
        alive = rho * (bunit @ np.asarray(self.r, dtype=float)) <= self.F.max_support * (1 + 1e-12)
        return NodeSet(mu, rho, frames, bunit, weight, cut, index).subset(alive)

    def polar_nodes(self) -> NodeSet:
        """Gauss-Legendre in ``|mu|`` times the sphere (or cap) rule."""
        lo, hi = self.rho_range
        if hi <= lo:
            z = np.zeros((0, self.g.d2))
            return self.make_nodes(z, np.zeros(0))
        rho, w_rad = _gl(lo, hi, self.quad.radial)
        omega, w_ang = self._angular()
        mu = (rho[:, None, None] * omega[None]).reshape(-1, self.g.d2)
        w = (w_rad * rho ** (self.g.d2 - 1))[:, None] * w_ang[None]
        return self.make_nodes(mu, w.ravel())

    def cartesian_nodes(self, dmu: float) -> tuple[NodeSet, np.ndarray, int]:
        """Nodes of the uniform grid ``dmu Z^{d2}`` inside the support.

        Returns the node set, the integer grid index of every node, and the
        number of grid points per axis of the smallest symmetric box that
        holds them.
        """
        hi = self.rho_range[1]
        m = int(np.ceil(hi / dmu)) + 1
        ax = np.arange(-m, m + 1)
        idx = np.stack(np.meshgrid(*([ax] * self.g.d2), indexing="ij"), -1).reshape(-1, self.g.d2)
        mu = idx * dmu
        inside = np.linalg.norm(mu, axis=1) <= hi
        idx, mu = idx[inside], mu[inside]
        ns = self.make_nodes(mu, np.full(mu.shape[0], dmu ** self.g.d2))
        return ns, idx[ns.index], 2 * m + 1

    def fft_plan(self, u_half: float, du: float | None = None) -> "FFTPlan":
        """Uniform frequency nodes whose trapezoid sum is an FFT onto a ``u`` grid.

        The grid has period ``2 u_half`` (kernels are periodized, so
        ``u_half`` must exceed their extent) and spacing at most ``du``,
        by default ``pi / (2 max|mu|)`` which samples ``|K|^2`` above its
        Nyquist rate.
        """
        dmu = np.pi / u_half
        ns, idx, nbox = self.cartesian_nodes(dmu)
        hi = self.rho_range[1]
        du = du or np.pi / (2 * hi)
        n = int(2 ** np.ceil(np.log2(max(nbox, 2 * u_half / du))))
        return FFTPlan(ns, idx, n, 2 * u_half / n, self.g.d2)

    def u_profiles(self, x: np.ndarray, plan: "FFTPlan") -> np.ndarray:
        """``K(x, u)`` on the periodic ``u`` grid of ``plan``, shape (n_x,) + (n,) * d2."""
        d2, n = self.g.d2, plan.n
        arr = np.zeros((x.shape[0],) + (n,) * d2, dtype=complex)
        if len(plan.nodes):
            kt = self.fiber(x, plan.nodes) * plan.nodes.weight[:, None]
            arr[(slice(None),) + tuple((plan.idx % n).T)] = kt.T
        axes = tuple(range(1, d2 + 1))
        K = np.fft.ifftn(arr, axes=axes) * (n ** d2 * (2 * np.pi) ** (-d2))
        return np.fft.fftshift(K, axes=axes)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def empty(self) -> bool:
        return len(self.nodes) == 0

    # -- fiber function -------------------------------------------------------

    def _ensure_table(self, vmax: float):
        if self.r0 == 0:
            return
        if self._table is None or self._table.vmax < vmax:
            self._table = _KernelDirectionTable(self.F, self.r0, max(vmax * 1.05, 1.0),
                                                self.quad.xi)

    @property
    def prefactor(self) -> float:
        return (2 * np.pi) ** (-self.r0 - sum(self.r))

    def fiber(self, x: np.ndarray, nodes: NodeSet | None = None, sl=slice(None),
              q_chunk: int = 32) -> np.ndarray:
        """``Kt(x, mu)`` times the cutoff at the selected nodes, shape (n_q, n_x).

        Nodes are processed in chunks of similar ``|mu|`` so each chunk's
        Laguerre recurrence stops at its own largest degree.
        """
        nodes = self.nodes if nodes is None else nodes
        rho, frames, bunit = nodes.rho[sl], nodes.frames[sl], nodes.bunit[sl]
        out = np.empty((rho.size, x.shape[0]), dtype=float if self.F.real else complex)
        order = np.argsort(rho, kind="stable")
        for a, b in chunk_bounds(rho.size, q_chunk):
            o = order[a:b]
            out[o] = self._fiber(x, rho[o], frames[o], bunit[o])
        return out * nodes.cutoff[sl, None]

    def fiber_at(self, x: np.ndarray, mu: np.ndarray) -> np.ndarray:
        """``Kt(x, mu)`` with cutoffs at arbitrary frequencies ``mu`` (n, d2)."""
        mu = np.atleast_2d(np.asarray(mu, dtype=float))
        out = np.zeros((mu.shape[0], x.shape[0]), dtype=float if self.F.real else complex)
        ns = self.make_nodes(mu, np.ones(mu.shape[0]))
        if len(ns):
            out[ns.index] = self.fiber(x, ns)
        return out

    def _fiber(self, x: np.ndarray, rho: np.ndarray, frames: np.ndarray,
               bunit: np.ndarray) -> np.ndarray:
        maxA = self.F.max_support
        dtype = float if self.F.real else complex
        out = np.zeros((rho.size, x.shape[0]), dtype=dtype)
        if rho.size == 0:
            return out
        y = np.einsum("xd,qde->qxe", x, frames)
        N, r = len(self.r), np.asarray(self.r, dtype=float)
        col, s = 0, []
        for rk in self.ranks:
            s.append(np.sum(y[:, :, col:col + rk] ** 2, axis=2))
            col += rk
        if self.r0:
            v = np.sqrt(np.sum(y[:, :, col:] ** 2, axis=2))
            self._ensure_table(float(v.max()))
        lam = rho[:, None] * bunit  # (c, N)
        base = lam @ r  # eta at k = 0
        slack = maxA * (1 + 1e-12) - base
        kmax = [int(np.floor(np.max(slack / (2 * lam[:, n])))) for n in range(N)]
        if min(kmax) < 0:
            return out
        # blocks after the first are tabulated, the first is streamed
        tables = [laguerre_table(kmax[n], lam[:, n, None], self.r[n], s[n]) for n in range(1, N)]
        combos = list(itertools.product(*[range(kmax[n] + 1) for n in range(1, N)]))
        rest = np.array([[2.0 * k for k in c] for c in combos]).reshape(len(combos), N - 1)
        eta_rest = base[:, None] + lam[:, 1:] @ rest.T  # (c, n_combos)
        for k0, phi0 in enumerate(laguerre_iter(kmax[0], lam[:, 0, None], self.r[0], s[0])):
            eta0 = eta_rest + 2.0 * k0 * lam[:, 0, None]
            if eta0.min() > maxA * (1 + 1e-12):
                break
            for ci, combo in enumerate(combos):
                eta = eta0[:, ci]
                valid = eta <= maxA * (1 + 1e-12)
                if not valid.any():
                    continue
                term = phi0
                for n, k in enumerate(combo):
                    term = term * tables[n][k]
                if self.r0 == 0:
                    G = self.F(eta)[:, None]
                else:
                    G = self._table.lookup(self._table.rows(np.where(valid, eta, np.inf)), v)
                out += np.where(valid[:, None], G * term, 0)
        return self.prefactor * out

    # -- synthesis ------------------------------------------------------------

    def check_nyquist(self, u_extent: float) -> None:
        """Raise if the polar nodes cannot resolve ``exp(i mu . u)`` for ``|u| <= u_extent``."""
        if self.empty or u_extent == 0:
            return
        lo, hi = self.rho_range
        if (hi - lo) * u_extent / self.quad.radial > np.pi:
            raise ValueError(
                f"radial quadrature too coarse: |mu| range {hi - lo:.3g} x u-extent "
                f"{u_extent:.3g} / {self.quad.radial} nodes > pi; raise QuadratureSpec.radial"
            )
        if self.g.d2 > 1:
            if self.partition is not None and isinstance(self.selection, (int, np.integer)):
                span = 2 * min(self.partition.support_angle, np.pi)
                nang = self.quad.sphere
            else:
                span = np.pi if self.g.d2 > 2 else 2 * np.pi
                nang = self.quad.sphere * (2 if self.g.d2 == 2 else 1)
            if hi * u_extent * span / nang > np.pi:
                raise ValueError(
                    f"angular quadrature too coarse for u-extent {u_extent:.3g}; "
                    "raise QuadratureSpec.sphere"
                )

    def synthesize(self, x: np.ndarray, u: np.ndarray, q_chunk: int = 64) -> np.ndarray:
        """``K(x, u)`` for all pairs, shape (n_x, n_u)."""
        out = np.zeros((x.shape[0], u.shape[0]), dtype=complex)
        ns = self.nodes
        for a, b in chunk_bounds(len(ns), q_chunk):
            kt = self.fiber(x, ns, slice(a, b))
            E = np.exp(1j * (ns.mu[a:b] @ u.T))
            out += (kt * ns.weight[a:b, None]).T @ E
        return out * (2 * np.pi) ** (-self.g.d2)

    def u_mass(self, x: np.ndarray, q_chunk: int = 64) -> np.ndarray:
        """``int |K(x, u)|^2 du`` for each row of ``x`` (Parseval in ``u``)."""
        out = np.zeros(x.shape[0])
        ns = self.nodes
        for a, b in chunk_bounds(len(ns), q_chunk):
            kt = self.fiber(x, ns, slice(a, b))
            out += ns.weight[a:b] @ (np.abs(kt) ** 2)
        return out * (2 * np.pi) ** (-self.g.d2)

    def map_grid(self, grid: Grid, reducer: Callable[[int, int, np.ndarray], object],
                 x_chunk: int = 1024, q_chunk: int = 64) -> list:
        """Evaluate the kernel on ``grid`` in chunks of first-layer nodes.

        ``reducer(a, b, values)`` receives the values for first-layer nodes
        ``a:b`` (shape ``(b - a, n_u)``); its results are returned in chunk
        order.
        """
        gx, gu = grid.split(self.g.d1)
        u = gu.points()
        self.check_nyquist(float(np.max(np.linalg.norm(u, axis=1))))
        if self.r0 and not self.empty:
            xs = gx.points()
            self._ensure_table(float(np.max(np.linalg.norm(xs, axis=1))))

        def work(bounds):
            a, b = bounds
            x = gx.points(a, b)
            if self.empty:
                vals = np.zeros((b - a, u.shape[0]), dtype=complex)
            else:
                vals = self.synthesize(x, u, q_chunk)
            return reducer(a, b, vals)

        return parallel_map(work, chunk_bounds(gx.size, x_chunk))

    def evaluate(self, grid: Grid, **kw) -> np.ndarray:
        parts = self.map_grid(grid, lambda a, b, v: v, **kw)
        return np.concatenate(parts, axis=0).reshape(grid.shape)

    def metadata(self) -> dict:
        sel = self.selection
        if isinstance(sel, np.integer):
            sel = int(sel)
        elif sel is not None and not isinstance(sel, int):
            sel = [int(j) for j in sel]
        return {
            "multiplier": self.F.name,
            "support": list(self.F.support),
            "ell": self.ell,
            "cap": None if self.partition is None else {
                "delta": self.partition.delta, "selection": sel, "count": len(self.partition),
            },
            "quadrature": self.quad.to_dict(),
            "nodes": int(self.n_nodes),
            "ranks": list(self.ranks),
            "r0": int(self.r0),
            "xiNodes": None if self._table is None else int(self._table.n_xi),
            "kTruncation": "exact: (2k_n + r_n) b_n <= max A",
        }


@dataclass
class FFTPlan:
    """Cartesian frequency nodes and the matching periodic ``u`` grid."""

    nodes: NodeSet
    idx: np.ndarray
    n: int
    du: float
    d2: int

    @property
    def u_axis(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.du

    def u_points(self) -> np.ndarray:
        ax = self.u_axis
        return np.stack(np.meshgrid(*([ax] * self.d2), indexing="ij"), -1).reshape(-1, self.d2)

    @property
    def cell(self) -> float:
        return self.du ** self.d2


def evaluate_kernel(g: TwoStepGroup, F: Multiplier, chi: ScalePartition | None, ell: int,
                    cap, grid: Grid, quad: QuadratureSpec | None = None,
                    tol: float = TOL_CLUSTER) -> KernelSample:
    """Kernel of ``F(L) chi(2^ell U) zeta_j(U)`` sampled on ``grid``.

    Parameters
    ----------
    cap : (CapPartition, j) or None
        Angular localization; None for the trivial cap.

    Returns
    -------
    KernelSample
        Values plus metadata; the wall time sits under ``metadata["timing"]``.
    """
    t0 = time.perf_counter()
    ev = KernelEvaluator(g, F, chi, ell, cap, quad, tol)
    vals = ev.evaluate(grid)
    meta = ev.metadata()
    meta["timing"] = {"seconds": time.perf_counter() - t0}
    return KernelSample(GridFunction(g, grid, vals), meta)
