"""
Numerical experiments on spectral-multiplier kernels.

Each experiment returns an :class:`ExperimentReport` pairing every measured
value with its reference, tolerance and verdict.  Thresholds and calibrated
constants live in :data:`DEFAULTS` and :data:`GOLDENS`; call sites never
hard-code them.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import roots_legendre
from threadpoolctl import threadpool_limits

from ._parallel import chunk_bounds, parallel_map
from .group import Grid, GridFunction, TwoStepGroup, convolve, group_to_spec, rotation_planes
from .kernels import (
    CapPartition,
    KernelEvaluator,
    Multiplier,
    QuadratureSpec,
    ScalePartition,
    dyadic_multiplier_pieces,
    min_scale_ell0,
    smooth_step,
    sphere_rule,
)
from .spectral import check_assumption_B, exponents, spectral_decompose
from .sphere import DEFAULT_SEED, sphere_area

__all__ = [
    "DEFAULTS",
    "GOLDENS",
    "Check",
    "ExperimentReport",
    "norm_M2",
    "sobolev_norm",
    "sobolev_embedding_check",
    "plancherel_closed_form",
    "plancherel_crosscheck",
    "weighted_moments",
    "weighted_plancherel_slope",
    "sqrt_piece_multiplier",
    "propagation_profile",
    "propagation_support_fraction",
    "propagation_covariance",
    "calibrate_radius",
    "calibrate_threshold",
    "localization_data",
    "localization_profile",
    "restriction_ratio_experiment",
    "young_ratio",
]

# Every threshold used for a verdict.  Bump "version" whenever a value changes.
DEFAULTS: dict = {
    "version": "1",
    "plancherel": {
        "ratioTol": {"heisenberg": 0.05, "default": 0.10},
        "shellWidth": 0.1,
        "shellMax": 0.01,
        "xHalf": 10.0,
        "xStep": 0.5,
        "uHalfBase": 16.0,
        "closedFormNodes": 64,
    },
    "weightedSlope": {
        "tol": 0.3,
        "minLevels": 3,
        "xHalf": 24.0,
        "xStep": {"2": 0.25, "default": 0.5},
        "uHalfBase": 64.0,
        "edgeMax": 1e-3,
        "massMin": 0.99,
    },
    "sobolev": {"stability": 0.2, "samplesPerBin": 256},
    "propagation": {
        "fractionMin": 0.99,
        "driftMax": 0.02,
        "lamMax": 16.0,
        "levelsAbove": 2,
        "halfWidth": 32.0,
        "iotaMaxSampling": 10,
        "cMax": 3.0,
        "cStep": 0.05,
    },
    "localization": {
        "outsideMax": 0.01,
        "gamma": 0.1,
        "lamMax": 16.0,
        "cStep": 0.05,
        "first": {"radial": 16, "sphere": 16, "kernelNodes": 48, "ringNodes": 32,
                  "angleNodes": 8, "extent": 12.0, "ringExtent": 6.0},
        "second": {"xHalf": 12.0, "xStep": 0.5, "uHalf": 40.0},
    },
    "restriction": {"youngSlack": 1e-9, "spread": 3.0, "minTrials": 10},
    "calibration": {"regression": 0.10},
}

# Constants measured once by the calibration runs in ``demos/calibrate.py``
# and frozen here; later runs must reproduce them within
# DEFAULTS["calibration"]["regression"].
GOLDENS: dict = {
    "version": "1",
    "propagation": {"heisenberg(1)": {"c": 2.5}},
    "localization": {
        "first": {"n32_glued(1)": {"C": 1.45, "ell": 1, "iota": 1}},
        "second": {"heisenberg_reiter(1,2)": {"C": 4.3, "ell": 0, "iota": 2}},
    },
    "restriction": {"heisenberg(1)": {"cHat": 0.0801}},
}


# ----------------------------------------------------------------------------
# reports


def _jsonable(v):
    if isinstance(v, Fraction):
        return f"{v.numerator}/{v.denominator}" if v.denominator != 1 else str(v.numerator)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_jsonable(a) for a in v.tolist()]
    if isinstance(v, dict):
        return {str(k): _jsonable(a) for k, a in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(a) for a in v]
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


@dataclass
class Check:
    """One measured quantity against its reference.

    ``verdict`` is ``"pass"``, ``"fail"``, ``"inconclusive"``, ``"info"``
    (recorded, not judged) or ``"refused"``.
    """

    name: str
    measured: object
    reference: object
    tolerance: object
    verdict: str
    source: str = ""

    def to_dict(self) -> dict:
        return _jsonable({
            "name": self.name, "measured": self.measured, "reference": self.reference,
            "tolerance": self.tolerance, "verdict": self.verdict, "source": self.source,
        })


_SEVERITY = {"info": 0, "pass": 1, "heuristic": 2, "inconclusive": 3, "refused": 4, "fail": 5}


@dataclass
class ExperimentReport:
    """Result of one experiment.

    ``series`` holds rows ``(parameter, measured, reference, verdict)`` for
    sweeps and decay curves.  ``runtime`` is kept out of the JSON form so
    repeated runs compare byte for byte.
    """

    experiment: str
    inputs: dict
    measured: dict
    checks: list
    notes: str = ""
    series: list = field(default_factory=list)
    runtime: float = 0.0
    override: str | None = None

    @property
    def verdict(self) -> str:
        if self.override is not None:
            return self.override
        judged = [c.verdict for c in self.checks if c.verdict != "info"]
        if not judged:
            return "info"
        return max(judged, key=_SEVERITY.__getitem__)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return _jsonable({
            "experiment": self.experiment,
            "defaultsVersion": DEFAULTS["version"],
            "inputs": self.inputs,
            "measured": self.measured,
            "checks": [c.to_dict() for c in self.checks],
            "verdict": self.verdict,
            "notes": self.notes,
            "series": [list(r) for r in self.series],
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def timing(self) -> dict:
        return {"experiment": self.experiment, "seconds": self.runtime}

    def to_text(self) -> str:
        lines = [f"{self.experiment}: {self.verdict.upper()}"]
        for k, v in self.inputs.items():
            lines.append(f"  {k:<18} {_jsonable(v)}")
        rows = [("check", "measured", "reference", "tolerance", "verdict")]
        for c in self.checks:
            rows.append((c.name, _fmt(c.measured), _fmt(c.reference), _fmt(c.tolerance),
                         c.verdict))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        for r in rows:
            lines.append("  " + "  ".join(s.ljust(w) for s, w in zip(r, widths)).rstrip())
        if self.notes:
            lines.append(f"  note: {self.notes}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parameter", "measured", "reference", "verdict"])
        rows = self.series or [(c.name, c.measured, c.reference, c.verdict) for c in self.checks]
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()


def _fmt(v) -> str:
    v = _jsonable(v)
    if isinstance(v, float):
        return f"{v:.6g}"
    if v is None:
        return "-"
    return str(v) if not isinstance(v, (list, dict)) else json.dumps(v)


def _within(measured: float, reference: float, tol: float) -> str:
    return "pass" if abs(measured - reference) <= tol else "fail"


def _group_id(g: TwoStepGroup) -> str:
    return g.name or group_to_spec(g)


def _family(g: TwoStepGroup) -> str:
    return (g.name or "").split("(")[0]


def _timed(fn):
    def wrapper(*args, **kw):
        t0 = time.perf_counter()
        with threadpool_limits(limits=1):
            rep = fn(*args, **kw)
        rep.runtime = time.perf_counter() - t0
        return rep

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    wrapper.__wrapped__ = fn
    return wrapper


# ----------------------------------------------------------------------------
# multiplier norms


def norm_M2(F: Multiplier, M: float, samples_per_bin: int | None = None) -> float:
    """``(M^-1 sum_K sup_{[(K-1)/M, K/M)} |F|^2)^(1/2)`` over bins meeting the support."""
    if not M > 0:
        raise ValueError("M must be positive")
    n = max(64, samples_per_bin or DEFAULTS["sobolev"]["samplesPerBin"])
    lo, hi = F.support
    k_lo, k_hi = int(math.floor(lo * M)) + 1, int(math.floor(hi * M)) + 1
    total = 0.0
    for K in range(k_lo, k_hi + 1):
        a, b = (K - 1) / M, K / M
        t = a + (b - a) * np.arange(n) / n
        extra = [e for e in (lo, hi) if a <= e < b]
        if extra:
            t = np.concatenate([t, extra])
        total += float(np.max(np.abs(F(t)) ** 2))
    return math.sqrt(total / M)


def _real_line_samples(F: Multiplier, n: int, half_width: float | None):
    T = half_width or max(4.0, 2.0 * F.support[1])
    dt = 2 * T / n
    t = -T + dt * np.arange(n)
    return t, F(t), dt


def sobolev_norm(F: Multiplier, s: float, half_width: float | None = None,
                 n: int = 2 ** 15) -> float:
    """``||(1 + tau^2)^(s/2) F^||_2 / sqrt(2 pi)`` by FFT of samples on ``[-T, T)``.

    ``F`` is taken as zero off its support (in particular on the negative
    axis).  With ``s = 0`` this equals the discrete ``L^2`` norm exactly.
    """
    if s < 0:
        raise ValueError("s must be nonnegative")
    t, v, dt = _real_line_samples(F, n, half_width)
    Fh = dt * np.fft.fft(v)
    tau = 2 * np.pi * np.fft.fftfreq(n, dt)
    dtau = 2 * np.pi / (n * dt)
    return float(np.sqrt(np.sum((1 + tau ** 2) ** s * np.abs(Fh) ** 2) * dtau / (2 * np.pi)))


def l2_norm(F: Multiplier, n: int = 2 ** 15, half_width: float | None = None) -> float:
    t, v, dt = _real_line_samples(F, n, half_width)
    return float(np.sqrt(np.sum(np.abs(v) ** 2) * dt))


@_timed
def sobolev_embedding_check(F: Multiplier, s: float = 1.0, Ms=(1, 2, 4, 8)) -> ExperimentReport:
    """Measure ``C_s(M) = ||F||_{M,2} / (||F||_2 + M^-s ||F||_{L^2_s})`` across ``M``."""
    tol = DEFAULTS["sobolev"]["stability"]
    l2, hs = l2_norm(F), sobolev_norm(F, s)
    checks, series, cs = [], [], []
    for M in Ms:
        m2 = norm_M2(F, M)
        checks.append(Check(f"L2 <= M2 (M={M})", l2, m2, 0.0,
                            "pass" if l2 <= m2 * (1 + 1e-12) else "fail", "lower embedding"))
        c = m2 / (l2 + M ** -s * hs)
        cs.append(c)
        series.append((M, c, None, "info"))
    mean = float(np.mean(cs))
    spread = max(abs(c / mean - 1) for c in cs)
    checks.append(Check("C_s spread about mean", spread, 0.0, tol,
                        "pass" if spread <= tol else "fail", "upper embedding"))
    return ExperimentReport("sobolev-embedding", {"multiplier": F.name, "s": s, "M": list(Ms)},
                            {"l2": l2, "sobolev": hs, "C": cs}, checks, series=series)


# ----------------------------------------------------------------------------
# Plancherel


def _shell_integral(F: Multiplier, r0: int, nodes: int, n_eta: int = 4096) -> CubicSpline:
    """Spline of ``eta -> int |F(s + eta)|^2 dsigma_r0(s)`` on ``[0, max A]``.

    With ``s = t^2`` the measure becomes ``|S^(r0-1)| t^(r0-1) dt``; each
    ``eta`` node is integrated by Gauss-Legendre over the ``t`` range where
    ``F(t^2 + eta)`` can be nonzero.
    """
    lo, hi = F.support
    xg, wg = roots_legendre(nodes)
    eta = np.linspace(0.0, hi, n_eta + 1)
    t_lo = np.sqrt(np.maximum(0.0, lo - eta))[:, None]
    t_hi = np.sqrt(np.maximum(0.0, hi - eta))[:, None]
    t = 0.5 * (t_lo + t_hi) + 0.5 * (t_hi - t_lo) * xg
    wt = 0.5 * (t_hi - t_lo) * wg
    vals = sphere_area(r0) * np.sum(wt * t ** (r0 - 1) * np.abs(F(t * t + eta[:, None])) ** 2,
                                    axis=1)
    return CubicSpline(eta, vals, extrapolate=False)


def plancherel_closed_form(g: TwoStepGroup, F: Multiplier, chi: ScalePartition | None = None,
                           ell=0, cap=None, quad: QuadratureSpec | None = None,
                           nodes: int | None = None) -> float:
    """``||K||_2`` from the spectral-side formula.

    .. math::

        (2\\pi)^{-|r| - r_0 - d_2} \\int \\sum_k |F(s + \\eta_k^\\mu)
        \\chi(2^l|\\mu|)\\zeta_j(\\mu)|^2 \\prod_n (b_n^\\mu)^{r_n}
        \\binom{k_n + r_n - 1}{k_n} \\, d\\sigma_{r_0}(s)\\, d\\mu

    For each direction and multi-index the radial variable is traded for
    ``eta = |mu| c_k`` so that every term is integrated over the interval
    where it is nonzero.  ``ell`` may be a level or an inclusive range.
    """
    n = nodes or DEFAULTS["plancherel"]["closedFormNodes"]
    ev = KernelEvaluator(g, F, chi, ell, cap, quad)
    lo_rho, hi_rho = ev.rho_range
    if hi_rho <= lo_rho:
        return 0.0
    lo_F, maxA = F.support
    omega, w_ang = ev._angular()
    zeta2 = ev.angular_cutoff(omega) ** 2
    r = np.asarray(ev.r)
    N, r0, d2 = len(r), ev.r0, g.d2
    xg, wg = roots_legendre(n)
    pref = (2 * np.pi) ** (-int(r.sum()) - r0 - d2)
    shell = _shell_integral(F, r0, n) if r0 else None
    total = 0.0
    for om, wa, z2 in zip(omega, w_ang, zeta2):
        if z2 == 0:
            continue
        b = spectral_decompose(g, om, ev.tol).b
        kmax = [int(math.floor((maxA / lo_rho - float(r @ b)) / (2 * b[i]))) for i in range(N)]
        if min(kmax) < 0:
            continue
        kv = np.array(list(itertools.product(*[range(k + 1) for k in kmax])), dtype=float)
        ck = (2 * kv + r) @ b
        lo_e = np.maximum(ck * lo_rho, 0.0)
        hi_e = np.minimum(ck * hi_rho, maxA)
        keep = hi_e > lo_e
        if not keep.any():
            continue
        kv, ck, lo_e, hi_e = kv[keep], ck[keep], lo_e[keep], hi_e[keep]
        eta = 0.5 * (lo_e + hi_e)[:, None] + 0.5 * (hi_e - lo_e)[:, None] * xg
        weta = 0.5 * (hi_e - lo_e)[:, None] * wg
        rho = eta / ck[:, None]
        cut = ev.radial_cutoff(rho) ** 2
        s_int = np.abs(F(eta)) ** 2 if r0 == 0 else np.nan_to_num(shell(eta))
        mult = np.prod([[comb(int(k) + int(rn) - 1, int(k)) for k, rn in zip(row, r)]
                        for row in kv], axis=1)
        bpow = np.prod(b ** r) * rho ** int(r.sum())
        acc = np.sum(mult[:, None] * weta / ck[:, None] * s_int * cut * bpow * rho ** (d2 - 1))
        total += wa * z2 * acc
    return float(np.sqrt(max(pref * total, 0.0)))


def crosscheck_grid(g: TwoStepGroup, ell: int) -> Grid:
    """Default grid: first layer at fixed resolution, second layer scaled by ``2^ell``."""
    P = DEFAULTS["plancherel"]
    X, hx = P["xHalf"], P["xStep"]
    nx = 2 * int(round(X / hx)) + 1
    U = P["uHalfBase"] * 2.0 ** max(ell, 0)
    hi = 2.0 ** -ell * ScalePartition.hi
    du = 0.9 * np.pi / (2 * hi)
    nu = 2 * int(math.ceil(U / du)) + 1
    return Grid.symmetric(g.d1, g.d2, X, nx, U, nu)


@_timed
def plancherel_crosscheck(g: TwoStepGroup, F: Multiplier, chi: ScalePartition | None = None,
                          ell: int = 0, cap=None, grid: Grid | None = None,
                          quad: QuadratureSpec | None = None) -> ExperimentReport:
    """Direct grid ``||K||_2`` against the closed form.

    The ratio must lie within the tolerance for the group family.  If more
    than ``shellMax`` of the grid mass sits in the outer shell of the box the
    verdict is inconclusive: enlarge the grid.
    """
    P = DEFAULTS["plancherel"]
    grid = grid or crosscheck_grid(g, ell)
    ev0 = KernelEvaluator(g, F, chi, ell, cap, quad)
    gx, gu = grid.split(g.d1)
    xs_half = max(max(abs(lo), abs(hi)) for lo, hi, _ in gx.axes)
    us_half = float(np.max(np.linalg.norm(gu.points(), axis=1)))
    one_cap = ev0.partition is not None and isinstance(ev0.selection, (int, np.integer))
    cap_angle = ev0.partition.support_angle if one_cap else np.pi
    q = (quad or QuadratureSpec()).adapted(ev0.rho_range, us_half, xs_half * math.sqrt(g.d1),
                                           F.max_support, g.d2, cap_angle)
    ev = KernelEvaluator(g, F, chi, ell, cap, q)
    width = P["shellWidth"]
    u_pts = gu.points()
    u_in = np.all(np.abs(u_pts) <= (1 - width) * np.array([a[1] for a in gu.axes]), axis=1)
    x_lim = (1 - width) * np.array([a[1] for a in gx.axes])

    def reduce(a, b, vals):
        x = gx.points(a, b)
        m = np.abs(vals) ** 2
        inner = np.all(np.abs(x) <= x_lim, axis=1)[:, None] & u_in[None, :]
        return float(m.sum()), float(m[~inner].sum())

    parts = ev.map_grid(grid, reduce)
    cell = grid.cell_measure
    direct2 = sum(p[0] for p in parts) * cell
    shell2 = sum(p[1] for p in parts) * cell
    direct = math.sqrt(direct2)
    closed = plancherel_closed_form(g, F, chi, ell, cap, q)
    tol = P["ratioTol"].get(_family(g), P["ratioTol"]["default"])
    shell = shell2 / direct2 if direct2 > 0 else 0.0
    checks = [Check("boundary shell mass", shell, 0.0, P["shellMax"],
                    "pass" if shell <= P["shellMax"] else "inconclusive", "grid coverage")]
    if closed == 0 and direct == 0:
        ratio = 1.0
    else:
        ratio = direct / closed if closed > 0 else math.inf
    covered = shell <= P["shellMax"]
    # a truncated kernel says nothing about the ratio
    checks.append(Check("direct / closed form", ratio, 1.0, tol,
                        _within(ratio, 1.0, tol) if covered else "inconclusive",
                        "closed-form Plancherel"))
    notes = "" if covered else "kernel mass reaches the grid boundary; enlarge grid"
    return ExperimentReport(
        "plancherel-crosscheck",
        {"group": _group_id(g), "multiplier": F.name, "ell": ell,
         "cap": ev.metadata()["cap"], "grid": [list(a) for a in grid.axes],
         "quadrature": q.to_dict()},
        {"direct": direct, "closedForm": closed, "ratio": ratio, "shellFraction": shell,
         "nodes": ev.n_nodes},
        checks, notes)


# ----------------------------------------------------------------------------
# weighted Plancherel



def x_rule(g: TwoStepGroup, half: float, step: float,
           reduce: bool = True) -> tuple[np.ndarray, np.ndarray, list]:
    """First-layer integration rule for rotation-invariant integrands.

    Each plane from :func:`rotation_planes` is replaced by a radial
    Gauss-Legendre rule on ``[0, half]`` (8 nodes per panel of width at
    most 2) along its first axis with weight
    ``2 pi r`` (the second axis pinned to zero); the other coordinates use
    the trapezoid rule with spacing ``step`` on ``[-half, half]``.  With
    ``reduce=False`` every coordinate uses the trapezoid rule; callers must
    pass it whenever an angular cap breaks the rotation symmetry.
    """
    planes = rotation_planes(g) if reduce else []
    n = int(round(half / step))
    trap = step * np.arange(-n, n + 1)
    panels = max(1, math.ceil(half / 2.0))
    r, wr = _panel_gl(0.0, half, 8 * panels, panels=panels)
    axes, weights = [], []
    pinned = {j for _, j in planes}
    radial = {i for i, _ in planes}
    for c in range(g.d1):
        if c in pinned:
            axes.append(np.zeros(1))
            weights.append(np.ones(1))
        elif c in radial:
            axes.append(r)
            weights.append(2 * np.pi * r * wr)
        else:
            axes.append(trap)
            weights.append(np.full(trap.size, step))
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, g.d1)
    w = np.ones(1)
    for wa in weights:
        w = np.multiply.outer(w, wa).ravel()
    return pts, w, planes


def weighted_moments(g: TwoStepGroup, F: Multiplier, chi: ScalePartition | None, ell: int,
                     alphas=(0.0, 1.0), x_half: float | None = None,
                     x_step: float | None = None, u_half: float | None = None,
                     x_chunk: int = 512, reduce_symmetry: bool = True) -> dict:
    """``int |u|^(2 alpha) |K_l(x, u)|^2 dx du`` for each ``alpha``.

    ``u`` profiles come from an FFT of the fiber function sampled on a
    uniform frequency grid (spectrally accurate for the smooth, compactly
    supported integrand); the periodization length is ``2 u_half``.  The
    first layer uses :func:`x_rule`, which exploits rotation planes when the
    group has them.  Also returns the fraction of mass in
    the outer fifth of the ``u`` period, which must be negligible.
    """
    W = DEFAULTS["weightedSlope"]
    x_half = x_half or W["xHalf"]
    x_step = x_step or W["xStep"].get(str(g.d1), W["xStep"]["default"])
    u_half = u_half or W["uHalfBase"] * 2.0 ** max(ell, 0)
    ev = KernelEvaluator(g, F, chi, ell)
    plan = ev.fft_plan(u_half)
    upts = plan.u_points()
    unorm = np.linalg.norm(upts, axis=1)
    edge = unorm > 0.8 * u_half
    weights = np.stack([unorm ** (2 * a) for a in alphas])
    xs, wx, planes = x_rule(g, x_half, x_step, reduce_symmetry)
    if ev.r0:
        ev._ensure_table(float(np.max(np.linalg.norm(xs, axis=1))))

    def work(bounds):
        a, b = bounds
        K = ev.u_profiles(xs[a:b], plan).reshape(b - a, -1)
        col = wx[a:b] @ (np.abs(K) ** 2)
        return weights @ col, float(col[edge].sum()), float(col.sum())

    parts = parallel_map(work, chunk_bounds(xs.shape[0], x_chunk))
    tot = np.sum([p[0] for p in parts], axis=0) * plan.cell
    edge_frac = sum(p[1] for p in parts) / max(sum(p[2] for p in parts), 1e-300)
    return {"alphas": list(alphas), "values": [float(v) for v in tot],
            "edgeFraction": float(edge_frac), "nodes": len(plan.nodes), "uHalf": u_half,
            "xHalf": x_half, "xStep": x_step, "rotationPlanes": planes}


@_timed
def weighted_plancherel_slope(g: TwoStepGroup, F: Multiplier, chi: ScalePartition | None = None,
                              alpha: float = 0.0, ell_range=range(0, 5), law: str = "stated",
                              moments: dict | None = None, **grid_kw) -> ExperimentReport:
    """Fit ``log2 int ||u|^alpha K_l|^2`` against ``l`` and compare with a scaling law.

    Two laws are reported.  ``"stated"`` expects slope ``d2 - 2 alpha`` and
    ``"scaling"`` expects ``2 alpha - d2``, the exponent produced by the
    change of variables ``mu -> 2^-l mu`` on the frequency side.  The
    report's verdict follows ``law``; the other is recorded as info.
    ``moments`` may pass precomputed ``{l: weighted_moments(...)}`` results
    (they must include ``alpha = 0``, which is compared with the closed-form
    norm to confirm the first-layer box holds the kernel).
    """
    W = DEFAULTS["weightedSlope"]
    ells = list(ell_range)
    if len(ells) < W["minLevels"]:
        raise ValueError(f"need at least {W['minLevels']} levels, got {len(ells)}")
    if law not in ("stated", "scaling"):
        raise ValueError("law must be 'stated' or 'scaling'")
    vals, edges, cover = [], [], []
    series = []
    for ell in ells:
        mom = (moments or {}).get(ell) or weighted_moments(g, F, chi, ell, (0.0, alpha),
                                                           **grid_kw)
        v = mom["values"][mom["alphas"].index(alpha)]
        vals.append(v)
        edges.append(mom["edgeFraction"])
        cover.append(mom["values"][mom["alphas"].index(0.0)]
                     / plancherel_closed_form(g, F, chi, ell) ** 2)
        series.append((ell, v, None, "info"))
    y = np.log2(np.asarray(vals))
    slope = float(np.polyfit(np.asarray(ells, dtype=float), y, 1)[0])
    stated = g.d2 - 2 * alpha
    scaling = 2 * alpha - g.d2
    tol = W["tol"]
    checks = [
        Check("slope vs d2 - 2 alpha", slope, stated, tol,
              _within(slope, stated, tol) if law == "stated" else "info", "stated exponent"),
        Check("slope vs 2 alpha - d2", slope, scaling, tol,
              _within(slope, scaling, tol) if law == "scaling" else "info", "frequency scaling"),
        Check("periodization edge mass", max(edges), 0.0, W["edgeMax"],
              "pass" if max(edges) <= W["edgeMax"] else "inconclusive", "u-period coverage"),
        Check("captured mass / closed form", min(cover), 1.0, 1 - W["massMin"],
              "pass" if min(cover) >= W["massMin"] else "inconclusive", "x-box coverage"),
    ]
    return ExperimentReport(
        "weighted-plancherel-slope",
        {"group": _group_id(g), "multiplier": F.name, "alpha": alpha, "ells": ells, "law": law},
        {"slope": slope, "values": vals, "edgeFraction": edges, "massCoverage": cover},
        checks, series=series)


# ----------------------------------------------------------------------------
# finite propagation


_PIECES: dict = {}


def sqrt_piece_multiplier(F: Multiplier, iota: int, lam_max: float | None = None,
                          half_width: float | None = None) -> Multiplier:
    """``lam -> F^(iota)(sqrt(lam)) eta(lam / lam_max)``.

    The dyadic piece is band limited but not compactly supported, so it is
    rolled off smoothly between ``lam_max`` and ``2 lam_max``.  The result's
    kernel is the exact piece's kernel convolved with the kernel of
    ``eta(L / lam_max)``, a Schwartz function at scale ``lam_max^-1/2``.
    """
    P = DEFAULTS["propagation"]
    lam_max = lam_max or P["lamMax"]
    half_width = half_width or P["halfWidth"]
    key = (F.name, F.support, half_width)
    if key not in _PIECES:
        _PIECES[key] = dyadic_multiplier_pieces(F, P["iotaMaxSampling"], half_width)
    piece = _PIECES[key][iota + 1]
    return Multiplier(lambda lam: piece(np.sqrt(lam)) * smooth_step(lam / lam_max),
                      (0.0, 2.0 * lam_max), True, f"{F.name}^({iota})(sqrt)|{lam_max:g}",
                      piece.real)


def propagation_profile(g: TwoStepGroup, F: Multiplier, iota: int, c_max: float | None = None,
                        lam_max: float | None = None, x_step: float | None = None,
                        bins: int = 600) -> dict:
    """Cumulative ``L^2`` mass of the ``iota``-th piece kernel in homogeneous balls.

    Sums the dyadic levels ``-l0 .. iota + levelsAbove`` (the cutoffs
    telescope into one) over all caps.  Returns ``c`` values and the mass
    fraction inside ``{|x| + |u|^(1/2) <= c 2^iota}``; the total mass comes
    from the closed form so mass outside the grid counts as outside.
    """
    P = DEFAULTS["propagation"]
    c_max = c_max or P["cMax"]
    lam_max = lam_max or P["lamMax"]
    m = sqrt_piece_multiplier(F, iota, lam_max)
    ell0 = min_scale_ell0(g, m.support)
    ells = (-ell0, iota + P["levelsAbove"])
    ev = KernelEvaluator(g, m, None, ells)
    R = c_max * 2.0 ** iota
    u_half = max(R * R, 4.0 * 2.0 ** (ells[1] + 1)) * 1.25
    plan = ev.fft_plan(u_half)
    hx = x_step or min(0.25, 0.8 * np.pi / (2 * np.sqrt(m.max_support)))
    xs, wx, _ = x_rule(g, R, hx)
    inside = np.linalg.norm(xs, axis=1) <= R + 1e-12
    xs, wx = xs[inside], wx[inside]
    if ev.r0:
        ev._ensure_table(R)
    uabs = np.linalg.norm(plan.u_points(), axis=1)
    edges = np.linspace(0.0, c_max, bins + 1)
    scale = 2.0 ** iota

    def work(bounds):
        a, b = bounds
        x = xs[a:b]
        K = ev.u_profiles(x, plan).reshape(b - a, -1)
        w = wx[a:b, None] * np.abs(K) ** 2
        hn = (np.linalg.norm(x, axis=1)[:, None] + np.sqrt(uabs)[None]) / scale
        return np.histogram(hn.ravel(), bins=edges, weights=w.ravel())[0]

    hist = np.sum(parallel_map(work, chunk_bounds(xs.shape[0], 256)), axis=0)
    hist = hist * plan.cell
    total = plancherel_closed_form(g, m, None, ells) ** 2
    frac = np.cumsum(hist) / total
    return {"c": edges[1:], "fraction": frac, "total": total, "grid": float(hist.sum()),
            "ells": list(ells), "lamMax": lam_max, "nodes": len(plan.nodes),
            "multiplier": m.name}


@_timed
def propagation_support_fraction(g: TwoStepGroup, F: Multiplier, iota: int,
                                 c: float | None = None, profile: dict | None = None,
                                 **kw) -> ExperimentReport:
    """Mass fraction of the ``iota``-th piece kernel inside the ball of radius ``c 2^iota``."""
    P = DEFAULTS["propagation"]
    gid = _group_id(g)
    golden = GOLDENS["propagation"].get(gid, {}).get("c")
    c = c if c is not None else golden
    if c is None:
        raise ValueError(f"no calibrated radius for {gid}; pass c")
    prof = profile or propagation_profile(g, F, iota, **kw)
    if c > prof["c"][-1] + 1e-12:
        raise ValueError("grid does not contain the target ball; raise c_max")
    frac = float(np.interp(c, prof["c"], prof["fraction"]))
    step = P["cStep"]
    series = [(round(float(cv), 6), float(fv), None, "info")
              for cv, fv in zip(prof["c"], prof["fraction"])
              if abs(cv / step - round(cv / step)) < 1e-6]
    checks = [Check("fraction inside ball", frac, P["fractionMin"], 0.0,
                    "pass" if frac >= P["fractionMin"] else "fail", "finite propagation")]
    return ExperimentReport(
        "propagation-support-fraction",
        {"group": gid, "multiplier": prof["multiplier"], "iota": iota, "c": c,
         "ells": prof["ells"], "lamMax": prof["lamMax"]},
        {"fraction": frac, "totalMass": prof["total"], "gridMass": prof["grid"],
         "nodes": prof["nodes"]}, checks, series=series)


@_timed
def propagation_covariance(g: TwoStepGroup, F: Multiplier, iotas=(0, 1, 2),
                           c: float | None = None, profiles: dict | None = None) -> ExperimentReport:
    """Support fractions at one radius factor across several pieces.

    Dilation covariance predicts the same fraction for every ``iota``; the
    spread must stay below ``driftMax`` and every fraction above
    ``fractionMin``.
    """
    P = DEFAULTS["propagation"]
    gid = _group_id(g)
    c = c if c is not None else GOLDENS["propagation"].get(gid, {}).get("c")
    if c is None:
        raise ValueError(f"no calibrated radius for {gid}; pass c")
    profiles = profiles or {}
    fr = {}
    for i in iotas:
        prof = profiles.get(i) or propagation_profile(g, F, i)
        fr[i] = float(np.interp(c, prof["c"], prof["fraction"]))
    vals = np.array(list(fr.values()))
    drift = float(vals.max() - vals.min())
    lo = float(vals.min())
    checks = [
        Check("smallest fraction inside ball", lo, P["fractionMin"], 0.0,
              "pass" if lo >= P["fractionMin"] else "fail", "finite propagation"),
        Check("fraction drift across pieces", drift, 0.0, P["driftMax"],
              "pass" if drift <= P["driftMax"] else "fail", "dilation covariance"),
    ]
    series = [(i, f, None, "info") for i, f in fr.items()]
    return ExperimentReport("propagation-covariance",
                            {"group": gid, "multiplier": F.name, "iotas": list(iotas), "c": c},
                            {"fractions": [fr[i] for i in iotas], "drift": drift}, checks,
                            series=series)


def calibrate_radius(c: np.ndarray, fractions: list[np.ndarray], target: float,
                     step: float) -> float:
    """Smallest ``c`` on a ``step`` lattice where every profile reaches ``target``."""
    ok = np.all(np.stack(fractions) >= target, axis=0)
    if not ok.any():
        raise ValueError("target not reached inside the profiled range")
    first = float(c[np.argmax(ok)])
    return math.ceil(first / step - 1e-9) * step


def calibrate_threshold(T: np.ndarray, outside: np.ndarray, scale: float, target: float,
                        step: float) -> float:
    """Smallest ``C`` on a ``step`` lattice with ``outside(C scale) <= target``.

    ``outside`` must be nonincreasing in ``T``.
    """
    ok = np.asarray(outside) <= target
    if not ok.any():
        raise ValueError("target not reached inside the profiled range")
    i = int(np.argmax(ok))
    if i == 0:
        t = float(T[0])
    else:
        # linear crossing between the last failing and first passing sample
        t0, t1, o0, o1 = T[i - 1], T[i], outside[i - 1], outside[i]
        t = float(t0 + (o0 - target) / (o0 - o1) * (t1 - t0))
    C = math.ceil(t / scale / step - 1e-9) * step
    # the lattice point must pass under the same interpolation used for verdicts
    while np.interp(C * scale, T, outside) > target:
        C += step
    return round(C, 10)


# ----------------------------------------------------------------------------
# localization


def _first_layer_profile(ev: KernelEvaluator, center: np.ndarray, T_max: float,
                         opts: dict) -> tuple[np.ndarray, np.ndarray]:
    """Mass density of ``K`` as a function of ``|Pbar x|`` for the frame at ``center``."""
    g = ev.g
    d = spectral_decompose(g, center, ev.tol)
    K0 = d.kernel_basis  # (d1, r0)
    Kb = np.hstack(list(d.bases))  # (d1, dbar1)
    dbar = Kb.shape[1]
    ext = opts["extent"]
    xk, wk = _panel_gl(-ext, ext, opts["kernelNodes"])
    r, wr = _panel_gl(0.0, T_max, opts["ringNodes"])
    if dbar == 1:
        dirs, wdir = np.array([[1.0], [-1.0]]), np.ones(2)
    elif dbar == 2:
        m = opts["angleNodes"]
        th = 2 * np.pi * np.arange(m) / m
        dirs, wdir = np.stack([np.cos(th), np.sin(th)], 1), np.full(m, 2 * np.pi / m)
    else:
        dirs, wdir = sphere_rule(dbar, max(2, opts["angleNodes"] // 2))
    # kernel-direction nodes as a product grid
    if K0.shape[1]:
        kn = np.stack(np.meshgrid(*([xk] * K0.shape[1]), indexing="ij"), -1).reshape(-1, K0.shape[1])
        kw = np.prod(np.stack(np.meshgrid(*([wk] * K0.shape[1]), indexing="ij"), -1)
                     .reshape(-1, K0.shape[1]), axis=1)
    else:
        kn, kw = np.zeros((1, 0)), np.ones(1)
    dens = np.zeros(r.size)
    for i, ri in enumerate(r):
        pts = (kn @ K0.T)[:, None, :] + ri * (dirs @ Kb.T)[None, :, :]
        pts = pts.reshape(-1, g.d1)
        w = (kw[:, None] * wdir[None, :]).ravel()
        dens[i] = np.dot(w, ev.u_mass(pts)) * ri ** (dbar - 1)
    return r, dens * wr


def _panel_gl(a: float, b: float, n: int, panels: int = 4):
    x, w = roots_legendre(max(2, n // panels))
    edges = np.linspace(a, b, panels + 1)
    h = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    return (mid[:, None] + h[:, None] * x).ravel(), (h[:, None] * w).ravel()


@_timed
def localization_profile(g: TwoStepGroup, layer: str, F: Multiplier | None = None,
                         chi: ScalePartition | None = None, ell: int = 0, iota: int = 0,
                         cap_j: int = 0, gamma: float | None = None, C: float | None = None,
                         force: bool = False, profile: dict | None = None) -> ExperimentReport:
    """Outside mass of ``K_{l,j}`` beyond a first- or second-layer threshold.

    The operator is ``m(L) chi(2^l U) zeta_j(U)`` with ``m`` the
    ``iota``-th square-root piece of ``F`` (default: canonical bump), caps
    of size ``delta = 2^(l - iota)``.  First layer: mass outside
    ``{|Pbar^{mu_j} x| <= T}``, verified at ``T = C 2^l 2^(gamma iota)``.
    Second layer: mass outside ``{|u| <= T}`` at ``T = C 2^l 2^iota``; the
    verdict is refused (or, with ``force``, only heuristic) when the
    kernel vectors of ``J_mu`` do not commute.
    """
    L = DEFAULTS["localization"]
    if layer not in ("first", "second"):
        raise ValueError("layer must be 'first' or 'second'")
    gamma = L["gamma"] if gamma is None else gamma
    gid = _group_id(g)
    inputs = {"group": gid, "layer": layer, "ell": ell, "iota": iota, "capIndex": cap_j,
              "gamma": gamma if layer == "first" else None}
    notes = ""
    if layer == "second":
        rep_b = check_assumption_B(g, 200)
        if not rep_b.holds:
            chk = Check("kernel vectors commute", rep_b.worst_residual, 0.0, rep_b.tolerance,
                        "fail", "hypothesis of the improved localization")
            if not force:
                return ExperimentReport("localization-profile", inputs,
                                        {"assumptionB": rep_b.to_dict()}, [chk],
                                        "improved second-layer localization is only proved "
                                        "when kernel vectors commute; no verdict issued",
                                        override="refused")
            notes = "kernel vectors do not commute; measurement is heuristic"
    prof = profile or localization_data(g, layer, F, chi, ell, iota, cap_j)
    golden = GOLDENS["localization"][layer].get(gid, {}).get("C")
    C = C if C is not None else golden
    if C is None:
        raise ValueError(f"no calibrated constant for {gid}; pass C")
    scale = prof["scale"](gamma) if callable(prof.get("scale")) else prof["scale"]
    T = C * scale
    out = float(np.interp(T, prof["T"], prof["outside"]))
    series = [(float(t), float(o), None, "info") for t, o in zip(prof["T"], prof["outside"])]
    verdict = "pass" if out <= L["outsideMax"] else "fail"
    checks = [Check("outside mass at threshold", out, 0.0, L["outsideMax"], verdict,
                    "rapid decay")]
    return ExperimentReport(
        "localization-profile", {**inputs, "C": C, "threshold": T, "delta": prof["delta"],
                                 "multiplier": prof["multiplier"]},
        {"outside": out, "totalMass": prof["total"]}, checks, notes, series,
        override="heuristic" if notes and verdict == "pass" else None)


def localization_data(g: TwoStepGroup, layer: str, F: Multiplier | None = None,
                      chi: ScalePartition | None = None, ell: int = 0, iota: int = 0,
                      cap_j: int = 0, gamma: float | None = None) -> dict:
    """Outside-mass curve ``T -> mass(outside)/mass`` for one localized kernel."""
    from .kernels import cap_partition

    L = DEFAULTS["localization"]
    gamma = L["gamma"] if gamma is None else gamma
    F = F or Multiplier.canonical_bump()
    m = sqrt_piece_multiplier(F, iota, L["lamMax"])
    delta = 2.0 ** (ell - iota)
    part = cap_partition(g.d2, min(delta, np.pi))
    cap = (part, cap_j)
    if layer == "first":
        o = L["first"]
        ev = KernelEvaluator(g, m, chi, ell, cap, QuadratureSpec(o["radial"], o["sphere"]))
        center = part.centers[cap_j] if len(part) > 1 else sphere_rule(g.d2, 1)[0][0]
        T_max = o["ringExtent"]
        r, mass = _first_layer_profile(ev, center, T_max, o)
        # mass beyond the sampled box counts as outside
        total = plancherel_closed_form(g, m, chi, ell, cap, QuadratureSpec(64, 64)) ** 2
        T = np.linspace(0.0, T_max, 121)
        cum = np.concatenate([[0.0], np.cumsum(mass)])
        rr = np.concatenate([[0.0], r])
        outside = 1.0 - np.interp(T, rr, cum) / total
        scale = lambda gm: 2.0 ** ell * 2.0 ** (gm * iota)
        return {"T": T, "outside": outside, "total": total, "scale": scale, "delta": delta,
                "multiplier": m.name}
    o = L["second"]
    ev = KernelEvaluator(g, m, chi, ell, cap)
    plan = ev.fft_plan(o["uHalf"])
    # one cap breaks the rotation symmetry, so the full first-layer grid is used
    xs, wx, _ = x_rule(g, o["xHalf"], o["xStep"], reduce=False)
    uabs = np.linalg.norm(plan.u_points(), axis=1)
    edges = np.linspace(0.0, o["uHalf"], 401)
    if ev.r0:
        ev._ensure_table(float(np.max(np.linalg.norm(xs, axis=1))))

    def work(bounds):
        a, b = bounds
        K = ev.u_profiles(xs[a:b], plan).reshape(b - a, -1)
        col = wx[a:b] @ (np.abs(K) ** 2)
        return np.histogram(uabs, bins=edges, weights=col)[0]

    hist = np.sum(parallel_map(work, chunk_bounds(xs.shape[0], 256)), axis=0) * plan.cell
    total = plancherel_closed_form(g, m, chi, ell, cap, QuadratureSpec(64, 64)) ** 2
    outside = 1.0 - np.concatenate([[0.0], np.cumsum(hist)]) / total
    return {"T": edges, "outside": outside, "total": total,
            "scale": 2.0 ** ell * 2.0 ** iota, "delta": delta, "multiplier": m.name}


# ----------------------------------------------------------------------------
# restriction-type ratios


def young_ratio(g: TwoStepGroup, f: GridFunction, K: GridFunction) -> float:
    """``||f * K||_2 / (||f||_1 ||K||_2)``; at most one for the discrete convolution."""
    conv = convolve(g, f, K)
    den = f.lp_norm(1) * K.l2_norm()
    return conv.l2_norm() / den if den > 0 else 0.0


def _random_source(grid: Grid, rng: np.random.Generator, box: int = 2) -> np.ndarray:
    vals = np.zeros(grid.shape)
    centre = tuple(n // 2 for n in grid.shape)
    sl = tuple(slice(c - box, c + box + 1) for c in centre)
    block = rng.random(vals[sl].shape)
    block[rng.random(block.shape) < 0.5] = 0.0
    vals[sl] = block
    return vals


@_timed
def restriction_ratio_experiment(g: TwoStepGroup, F: Multiplier, chi: ScalePartition | None,
                                 ells, partition: CapPartition | None, p=1, trials: int = 10,
                                 grids: dict | None = None, seed: int = DEFAULT_SEED,
                                 caps=None) -> ExperimentReport:
    """Empirical constant in the restriction-type bound over levels and caps.

    For each level and cap the kernel is sampled, ``trials`` seeded
    nonnegative test functions supported in a small box are convolved with
    it, and the largest ``||f * K||_2 / ||f||_p`` is divided by

        delta^((d2-1)/2 (1-vartheta_p)) 2^(-l d2 (1/p - 1/2))
        ||F||_2^(1-theta_p) ||F||_{2^l,2}^theta_p

    with the constant set to one.  Random inputs only bound the operator
    norm from below.  At ``p = 1`` the discrete Young inequality is checked
    for every trial.
    """
    from .kernels import evaluate_kernel

    R = DEFAULTS["restriction"]
    if trials < R["minTrials"]:
        raise ValueError(f"need at least {R['minTrials']} trials")
    p = Fraction(p)
    tab = exponents(p, g.d1, g.d2)
    if p < 1 or p > tab.st_min:
        raise ValueError(f"p must lie in [1, {tab.st_min}]")
    theta = tab.theta_p if tab.theta_p is not None else Fraction(0)
    vtheta = tab.vartheta_p if tab.vartheta_p is not None else Fraction(0)
    if p == 1:
        theta = vtheta = Fraction(0)
    delta = partition.delta if partition is not None else np.pi
    cap_ids = list(caps) if caps is not None else (
        list(range(len(partition))) if partition is not None else [None])
    rng = np.random.default_rng(seed)
    F2 = l2_norm(F)
    checks, series, chats, worst_young = [], [], [], 0.0
    for ell in ells:
        grid = (grids or {}).get(ell) or crosscheck_grid(g, ell)
        best = 0.0
        for j in cap_ids:
            cap = None if j is None else (partition, j)
            K = evaluate_kernel(g, F, chi, ell, cap, grid).function
            for _ in range(trials):
                f = GridFunction(g, grid, _random_source(grid, rng))
                conv = convolve(g, f, K)
                lhs = conv.l2_norm()
                fp = f.lp_norm(float(p))
                best = max(best, lhs / fp)
                if p == 1:
                    worst_young = max(worst_young, lhs / (f.lp_norm(1) * K.l2_norm()))
        rhs = (delta ** ((g.d2 - 1) / 2 * float(1 - vtheta))
               * 2.0 ** (-ell * g.d2 * float(Fraction(1) / p - Fraction(1, 2)))
               * F2 ** float(1 - theta) * norm_M2(F, 2.0 ** ell) ** float(theta))
        chats.append(best / rhs)
        series.append((ell, best / rhs, None, "info"))
    med = float(np.median(chats))
    spread = max(chats) / med
    checks.append(Check("max C / median C", spread, 1.0, R["spread"],
                        "pass" if spread <= R["spread"] else "fail", "bounded constant"))
    if p == 1:
        checks.append(Check("Young ratio", worst_young, 1.0, R["youngSlack"],
                            "pass" if worst_young <= 1 + R["youngSlack"] else "fail",
                            "Young inequality"))
    return ExperimentReport(
        "restriction-ratio",
        {"group": _group_id(g), "multiplier": F.name, "ells": list(ells), "p": p,
         "delta": delta, "caps": cap_ids, "trials": trials, "seed": seed},
        {"cHat": chats, "youngWorst": worst_young if p == 1 else None}, checks,
        "random test functions give lower bounds on the operator norm", series)
