"""
Two-step stratified groups in exponential coordinates.

A group is described by skew-symmetric matrices ``J_1, ..., J_d2`` acting on
the first layer ``R^d1``.  Points are pairs ``(x, u)`` with the product

    (x, u) . (x', u') = (x + x', u + u' + (1/2) v),   v_k = (J_k x)^T x'.

The module also holds the uniform grids used to discretize functions on the
group, the grid convolution, and the built-in families (Heisenberg groups,
glued copies of N_{3,2}, Heisenberg-Reiter groups).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._parallel import chunk_bounds, parallel_map

__all__ = [
    "TwoStepGroup",
    "GroupPoint",
    "Grid",
    "GridFunction",
    "GroupSpecError",
    "parse_group_spec",
    "group_to_spec",
    "builtin_group",
    "parse_builtin",
    "multiply",
    "invert",
    "homogeneous_norm",
    "dilate",
    "bracket",
    "convolve",
    "ball_volume_mc",
    "shared_center_reiter",
    "rotation_planes",
]

SKEW_TOL = 1e-12
PROJ_TOL = 1e-10


class GroupSpecError(ValueError):
    """Raised when a group description violates the structural invariants."""


class TwoStepGroup:
    """Two-step stratified group ``R^d1 x R^d2`` defined by its J matrices.

    Parameters
    ----------
    J : array_like, shape (d2, d1, d1)
        Skew-symmetric matrices.  They are checked, then exactly
        antisymmetrized.
    blocks : sequence of array_like, optional
        Candidate orthogonal projections P_1, ..., P_N on ``R^d1`` for the
        block decomposition used by :func:`stratlie.spectral.check_assumption_A`.
    name : str
        Free-form label.

    Raises
    ------
    GroupSpecError
        If a matrix is not skew, the J's are linearly dependent, or the
        blocks are not mutually orthogonal projections.
    """

    def __init__(self, J, blocks=None, name: str = ""):
        J = np.asarray(J, dtype=float)
        if J.ndim == 2:
            J = J[None]
        if J.ndim != 3 or J.shape[1] != J.shape[2]:
            raise GroupSpecError(f"J must have shape (d2, d1, d1), got {J.shape}")
        d2, d1 = J.shape[0], J.shape[1]
        if d1 < 1 or d2 < 1:
            raise GroupSpecError("d1 and d2 must be positive")
        if not np.all(np.isfinite(J)):
            raise GroupSpecError("J contains non-finite entries")
        for k in range(d2):
            defect = np.max(np.abs(J[k] + J[k].T))
            if defect > SKEW_TOL * (1.0 + np.max(np.abs(J[k]))):
                raise GroupSpecError(
                    f"J_{k + 1} is not skew-symmetric: max|J+J^T| = {defect:.3e}"
                )
        J = 0.5 * (J - np.transpose(J, (0, 2, 1)))
        flat = J.reshape(d2, -1)
        rank = np.linalg.matrix_rank(flat, tol=1e-10 * max(1.0, np.max(np.abs(flat))))
        if rank < d2:
            raise GroupSpecError(
                f"J_1..J_{d2} are linearly dependent (rank {rank} < {d2}); "
                "the commutator does not fill the second layer"
            )
        J.setflags(write=False)
        self._J = J
        self.d1 = int(d1)
        self.d2 = int(d2)
        self.name = str(name)
        self._blocks = None
        if blocks is not None:
            self._blocks = _validate_blocks(blocks, d1)

    @property
    def J(self) -> np.ndarray:
        return self._J

    @property
    def blocks(self) -> tuple[np.ndarray, ...] | None:
        return self._blocks

    @property
    def d(self) -> int:
        return self.d1 + self.d2

    @property
    def Q(self) -> int:
        """Homogeneous dimension ``d1 + 2 d2``."""
        return self.d1 + 2 * self.d2

    def j_matrix(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.d2,):
            raise ValueError(f"mu must have length {self.d2}, got shape {mu.shape}")
        return np.tensordot(mu, self._J, axes=1)

    def identity(self) -> "GroupPoint":
        return GroupPoint(np.zeros(self.d1), np.zeros(self.d2))

    def __repr__(self) -> str:
        label = f"{self.name!r}, " if self.name else ""
        nb = 0 if self._blocks is None else len(self._blocks)
        return f"TwoStepGroup({label}d1={self.d1}, d2={self.d2}, blocks={nb})"


def _validate_blocks(blocks, d1: int) -> tuple[np.ndarray, ...]:
    out = []
    for n, P in enumerate(blocks):
        P = np.asarray(P, dtype=float)
        if P.shape != (d1, d1):
            raise GroupSpecError(f"block {n} has shape {P.shape}, expected ({d1}, {d1})")
        if np.max(np.abs(P - P.T)) > PROJ_TOL:
            raise GroupSpecError(f"block {n} is not symmetric")
        if np.max(np.abs(P @ P - P)) > PROJ_TOL:
            raise GroupSpecError(f"block {n} is not idempotent")
        P = 0.5 * (P + P.T)
        P.setflags(write=False)
        out.append(P)
    for a in range(len(out)):
        for b in range(a + 1, len(out)):
            if np.max(np.abs(out[a] @ out[b])) > PROJ_TOL:
                raise GroupSpecError(f"blocks {a} and {b} have non-orthogonal ranges")
    total = sum(int(round(np.trace(P))) for P in out)
    if total > d1:
        raise GroupSpecError(f"block ranks sum to {total} > d1 = {d1}")
    return tuple(out)


@dataclass(frozen=True)
class GroupPoint:
    """A point ``(x, u)`` of the group."""

    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float)).copy()
        u = np.atleast_1d(np.asarray(self.u, dtype=float)).copy()
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ValueError("group point has non-finite entries")
        x.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GroupPoint):
            return NotImplemented
        return np.array_equal(self.x, other.x) and np.array_equal(self.u, other.u)

    def __hash__(self):
        return hash((self.x.tobytes(), self.u.tobytes()))


def _check_point(g: TwoStepGroup, p: GroupPoint) -> None:
    if p.x.shape != (g.d1,) or p.u.shape != (g.d2,):
        raise ValueError(
            f"point dimensions ({p.x.size}, {p.u.size}) do not match group ({g.d1}, {g.d2})"
        )


def bracket(g: TwoStepGroup, x, y) -> np.ndarray:
    """Second-layer bracket ``v_k = (J_k x)^T y``.

    ``x`` and ``y`` may carry leading batch dimensions; they broadcast.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    Jx = np.einsum("kij,...j->...ki", g.J, x)
    return np.einsum("...ki,...i->...k", Jx, y)


def multiply(g: TwoStepGroup, p: GroupPoint, q: GroupPoint) -> GroupPoint:
    """Group product ``p . q``."""
    _check_point(g, p)
    _check_point(g, q)
    return GroupPoint(p.x + q.x, p.u + q.u + 0.5 * bracket(g, p.x, q.x))


def invert(g: TwoStepGroup, p: GroupPoint) -> GroupPoint:
    """Inverse ``(-x, -u)``; exact because ``(J x)^T x = 0``."""
    _check_point(g, p)
    return GroupPoint(-p.x, -p.u)


def homogeneous_norm(p: GroupPoint) -> float:
    """``|x| + |u|^(1/2)``."""
    return float(np.linalg.norm(p.x) + np.sqrt(np.linalg.norm(p.u)))


def dilate(p: GroupPoint, R: float) -> GroupPoint:
    """Dilation ``(R x, R^2 u)``."""
    if not R > 0:
        raise ValueError(f"dilation factor must be positive, got {R}")
    return GroupPoint(R * p.x, R * R * p.u)


def ball_volume_mc(g: TwoStepGroup, R: float, n: int = 1_000_000, seed: int = 0) -> float:
    """Monte-Carlo volume of the homogeneous ball ``{|x| + |u|^(1/2) < R}``.

    Samples uniformly from the box ``[-R, R]^d1 x [-R^2, R^2]^d2`` that
    contains the ball.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-R, R, size=(n, g.d1))
    u = rng.uniform(-R * R, R * R, size=(n, g.d2))
    inside = np.linalg.norm(x, axis=1) + np.sqrt(np.linalg.norm(u, axis=1)) < R
    box = (2 * R) ** g.d1 * (2 * R * R) ** g.d2
    return float(box * np.count_nonzero(inside) / n)


# ----------------------------------------------------------------------------
# built-in families


def _heisenberg(n: int) -> TwoStepGroup:
    I = np.eye(n)
    Z = np.zeros((n, n))
    J = np.block([[Z, I], [-I, Z]])
    return TwoStepGroup(J[None], blocks=[np.eye(2 * n)], name=f"heisenberg({n})")


def _n32_block_matrices() -> np.ndarray:
    # J_mu x = mu cross x
    J = np.zeros((3, 3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        J[k] = np.cross(e, np.eye(3)).T
    return J


def _n32_glued(N: int) -> TwoStepGroup:
    base = _n32_block_matrices()
    d1 = 3 * N
    J = np.zeros((3, d1, d1))
    blocks = []
    for n in range(N):
        sl = slice(3 * n, 3 * n + 3)
        J[:, sl, sl] = base
        P = np.zeros((d1, d1))
        P[sl, sl] = np.eye(3)
        blocks.append(P)
    return TwoStepGroup(J, blocks=blocks, name=f"n32_glued({N})")


def _heisenberg_reiter(N: int, d2: int) -> TwoStepGroup:
    # coordinates ordered block by block: (x_1 in R^d2, y_1, x_2, y_2, ...)
    w = d2 + 1
    d1 = N * w
    J = np.zeros((d2, d1, d1))
    blocks = []
    for n in range(N):
        o = n * w
        for k in range(d2):
            J[k, o + k, o + d2] = 1.0
            J[k, o + d2, o + k] = -1.0
        P = np.zeros((d1, d1))
        P[o:o + w, o:o + w] = np.eye(w)
        blocks.append(P)
    return TwoStepGroup(J, blocks=blocks, name=f"heisenberg_reiter({N},{d2})")


def shared_center_reiter() -> TwoStepGroup:
    """Two Heisenberg-Reiter blocks whose centers overlap in one direction.

    Block one uses central coordinates ``(u1, u2)`` and block two
    ``(u2, u3)``.  At ``mu = e1`` the whole second block lies in the kernel
    of ``J_mu`` yet brackets nontrivially through ``J_2``, so kernel vectors
    do not commute.  Useful as a negative control.
    """
    J = np.zeros((3, 6, 6))
    for blk, (o, ks) in enumerate(((0, (0, 1)), (3, (1, 2)))):
        for i, k in enumerate(ks):
            J[k, o + i, o + 2] = 1.0
            J[k, o + 2, o + i] = -1.0
    blocks = []
    for o in (0, 3):
        P = np.zeros((6, 6))
        P[o:o + 3, o:o + 3] = np.eye(3)
        blocks.append(P)
    return TwoStepGroup(J, blocks=blocks, name="shared_center_reiter")


def rotation_planes(g: TwoStepGroup, tol: float = 1e-12) -> list[tuple[int, int]]:
    """Disjoint coordinate planes whose rotations extend to automorphisms.

    A rotation ``exp(t E)`` of the ``(i, j)`` plane of the first layer is
    kept when ``[J_k, E] = sum_l S_kl J_l`` with ``S`` skew, so that
    ``(x, u) -> (exp(tE) x, exp(tS) u)`` is an automorphism fixing the
    sub-Laplacian and ``|u|``.  Integrals of rotation-invariant functionals
    of a radial-in-``mu`` kernel then reduce to the half-plane ``x_j = 0``.
    Planes are chosen greedily in coordinate order.
    """
    d1, d2 = g.d1, g.d2
    Jflat = g.J.reshape(d2, -1).T
    used: set[int] = set()
    out = []
    for i in range(d1):
        for j in range(i + 1, d1):
            if i in used or j in used:
                continue
            E = np.zeros((d1, d1))
            E[i, j], E[j, i] = -1.0, 1.0
            C = np.stack([Jk @ E - E @ Jk for Jk in g.J])
            S = np.linalg.lstsq(Jflat, C.reshape(d2, -1).T, rcond=None)[0].T
            resid = np.abs(np.einsum("kl,lab->kab", S, g.J) - C).max()
            if resid <= tol and np.abs(S + S.T).max() <= tol:
                out.append((i, j))
                used.update((i, j))
    return out


_BUILTINS = {
    "heisenberg": (_heisenberg, 1),
    "n32_glued": (_n32_glued, 1),
    "heisenberg_reiter": (_heisenberg_reiter, 2),
}


def builtin_group(family: str, *params: int) -> TwoStepGroup:
    """Construct a built-in group.

    Parameters
    ----------
    family : {"heisenberg", "n32_glued", "heisenberg_reiter"}
    params : int
        ``heisenberg(n)``, ``n32_glued(N)``, ``heisenberg_reiter(N, d2)``.

    Examples
    --------
    >>> builtin_group("heisenberg", 1).Q
    4
    """
    if family not in _BUILTINS:
        raise ValueError(f"unknown family {family!r}; choose from {sorted(_BUILTINS)}")
    ctor, nparams = _BUILTINS[family]
    if len(params) != nparams:
        raise ValueError(f"{family} takes {nparams} integer parameter(s), got {len(params)}")
    ints = []
    for v in params:
        if int(v) != v or int(v) < 1:
            raise ValueError(f"{family} parameters must be positive integers, got {params}")
        ints.append(int(v))
    return ctor(*ints)


def parse_builtin(designator: str) -> TwoStepGroup:
    """Parse ``"family:p1,p2"`` designators such as ``"heisenberg_reiter:1,2"``."""
    family, _, rest = designator.partition(":")
    params = [int(s) for s in rest.split(",") if s.strip()] if rest else []
    return builtin_group(family.strip(), *params)


# ----------------------------------------------------------------------------
# group-spec documents


def parse_group_spec(text: str) -> TwoStepGroup:
    """Parse a JSON group description.

    The schema is ``{"name"?: str, "d1": int, "d2": int, "J": [d2 matrices],
    "blocks"?: [matrices]}`` with row-major nested arrays.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GroupSpecError(f"malformed group spec: {exc}") from None
    if not isinstance(doc, dict):
        raise GroupSpecError("group spec must be a JSON object")
    for key in ("d1", "d2", "J"):
        if key not in doc:
            raise GroupSpecError(f"group spec lacks required key {key!r}")
    d1, d2 = doc["d1"], doc["d2"]
    if not (isinstance(d1, int) and isinstance(d2, int)) or d1 < 1 or d2 < 1:
        raise GroupSpecError("d1 and d2 must be positive integers")
    try:
        J = np.array(doc["J"], dtype=float)
    except (TypeError, ValueError):
        raise GroupSpecError("J must be a list of numeric matrices") from None
    if J.shape != (d2, d1, d1):
        raise GroupSpecError(f"J has shape {J.shape}, expected ({d2}, {d1}, {d1})")
    blocks = doc.get("blocks")
    if blocks is not None:
        try:
            blocks = [np.array(P, dtype=float) for P in blocks]
        except (TypeError, ValueError):
            raise GroupSpecError("blocks must be numeric matrices") from None
    return TwoStepGroup(J, blocks=blocks, name=str(doc.get("name", "")))


def group_to_spec(g: TwoStepGroup) -> str:
    """Serialize a group to the JSON group-spec format."""
    doc = {"name": g.name, "d1": g.d1, "d2": g.d2, "J": g.J.tolist()}
    if g.blocks is not None:
        doc["blocks"] = [P.tolist() for P in g.blocks]
    return json.dumps(doc)


# ----------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class Grid:
    """Axis-aligned uniform box grid over ``R^d1 x R^d2``.

    ``axes`` holds one ``(lo, hi, count)`` triple per coordinate, first-layer
    axes first.
    """

    axes: tuple[tuple[float, float, int], ...]

    def __post_init__(self):
        axes = tuple((float(lo), float(hi), int(n)) for lo, hi, n in self.axes)
        for lo, hi, n in axes:
            if n < 2 or not hi > lo:
                raise ValueError(f"bad axis ({lo}, {hi}, {n})")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def symmetric(cls, d1: int, d2: int, x_half: float, nx: int,
                  u_half: float, nu: int) -> "Grid":
        """Grid ``[-x_half, x_half]^d1 x [-u_half, u_half]^d2``."""
        return cls(((-x_half, x_half, nx),) * d1 + ((-u_half, u_half, nu),) * d2)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(n for _, _, n in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(hi - lo) / (n - 1) for lo, hi, n in self.axes])

    @property
    def cell_measure(self) -> float:
        return float(np.prod(self.spacing))

    def coords(self, i: int) -> np.ndarray:
        lo, hi, n = self.axes[i]
        return np.linspace(lo, hi, n)

    def points(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Node coordinates in row-major order, rows ``start:stop``."""
        stop = self.size if stop is None else stop
        idx = np.unravel_index(np.arange(start, stop), self.shape)
        lo = np.array([a[0] for a in self.axes])
        return lo + np.stack(idx, axis=1) * self.spacing

    def split(self, d1: int) -> tuple["Grid", "Grid"]:
        """Split into first-layer and second-layer factor grids."""
        return Grid(self.axes[:d1]), Grid(self.axes[d1:])


class GridFunction:
    """Complex samples of a function on a grid over the group."""

    def __init__(self, group: TwoStepGroup, grid: Grid, values):
        if grid.ndim != group.d:
            raise ValueError(f"grid has {grid.ndim} axes, group needs {group.d}")
        values = np.asarray(values, dtype=complex)
        if values.size != grid.size:
            raise ValueError(f"{values.size} samples for a grid of {grid.size} nodes")
        self.group = group
        self.grid = grid
        self.values = values.reshape(grid.shape)

    @property
    def cell_measure(self) -> float:
        return self.grid.cell_measure

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.cell_measure))

    def lp_norm(self, p: float) -> float:
        a = np.abs(self.values)
        if np.isinf(p):
            return float(a.max())
        return float((np.sum(a ** p) * self.cell_measure) ** (1.0 / p))

    def to_csv(self, fh=None) -> str | None:
        """Write ``x1..xd1,u1..ud2,re,im`` rows with 17 significant digits.

        Returns the CSV text when ``fh`` is None.
        """
        g = self.group
        own = fh is None
        if own:
            fh = io.StringIO()
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(g.d1)] + [f"u{i + 1}" for i in range(g.d2)]
                   + ["re", "im"])
        vals = self.values.ravel()
        step = 65536
        for s in range(0, self.grid.size, step):
            pts = self.grid.points(s, min(s + step, self.grid.size))
            for row, v in zip(pts, vals[s:s + step]):
                w.writerow([f"{c:.17g}" for c in row] + [f"{v.real:.17g}", f"{v.imag:.17g}"])
        if own:
            return fh.getvalue()
        return None


def _interp_multilinear(values: np.ndarray, grid: Grid, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of grid samples at points, zero outside the box.

    Fractional indices within 1e-9 of an integer are snapped, so on-grid
    evaluations reproduce the samples exactly.
    """
    lo = np.array([a[0] for a in grid.axes])
    shape = np.array(grid.shape)
    t = (pts - lo) / grid.spacing
    r = np.rint(t)
    t = np.where(np.abs(t - r) < 1e-9, r, t)
    i0 = np.floor(t).astype(np.int64)
    frac = t - i0
    out = np.zeros(pts.shape[0], dtype=values.dtype)
    flat = values.ravel()
    strides = np.array([int(np.prod(shape[i + 1:])) for i in range(len(shape))])
    ndim = pts.shape[1]
    for corner in range(1 << ndim):
        offs = np.array([(corner >> a) & 1 for a in range(ndim)])
        idx = i0 + offs
        w = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=1)
        ok = np.all((idx >= 0) & (idx < shape), axis=1) & (w != 0.0)
        if not np.any(ok):
            continue
        lin = idx[ok] @ strides
        out[ok] += w[ok] * flat[lin]
    return out


def convolve(g: TwoStepGroup, f: GridFunction, h: GridFunction,
             chunk: int = 16384) -> GridFunction:
    """Riemann-sum group convolution ``f * h`` at the grid nodes.

    ``(f*h)(p) = sum_s f(s) h(s^{-1} p) * cell``, with ``h`` interpolated
    multilinearly off-grid and taken as zero outside the box.  Only nodes
    where ``f`` is nonzero contribute.  When the origin is a grid node the
    first-layer shift is an index shift and only the centre is
    interpolated.  Sources are summed in a fixed order, so the result does
    not depend on the number of worker threads.
    """
    if f.grid != h.grid:
        raise ValueError("f and h must share the same grid")
    grid = f.grid
    offset = _lattice_offset(grid)
    if offset is not None:
        return GridFunction(g, grid, _convolve_shifted(g, f, h, offset))
    cell = grid.cell_measure
    fv = f.values.ravel()
    src = np.flatnonzero(fv)
    src_pts = grid.points()[src] if src.size else np.zeros((0, grid.ndim))
    src_vals = fv[src]
    d1 = g.d1

    def work(bounds):
        a, b = bounds
        pts = grid.points(a, b)
        acc = np.zeros(b - a, dtype=complex)
        for s in range(src.size):
            xs, us = src_pts[s, :d1], src_pts[s, d1:]
            q = np.empty_like(pts)
            q[:, :d1] = pts[:, :d1] - xs
            q[:, d1:] = pts[:, d1:] - us - 0.5 * bracket(g, xs, pts[:, :d1])
            acc += src_vals[s] * _interp_multilinear(h.values, grid, q)
        return acc * cell

    parts = parallel_map(work, chunk_bounds(grid.size, chunk))
    return GridFunction(g, grid, np.concatenate(parts) if parts else np.zeros(0))


def _lattice_offset(grid: Grid) -> np.ndarray | None:
    """Index of the origin per axis when it is a grid node, else None."""
    lo = np.array([a[0] for a in grid.axes])
    o = -lo / grid.spacing
    r = np.rint(o)
    if np.all(np.abs(o - r) < 1e-9):
        return r.astype(np.int64)
    return None


def _convolve_shifted(g: TwoStepGroup, f: GridFunction, h: GridFunction,
                      offset: np.ndarray) -> np.ndarray:
    """Convolution on a grid containing the origin as a node.

    Differences of first-layer nodes are again nodes, so ``h`` is shifted
    by whole indices there; in the centre the shift
    ``u_s + [x_s, x] / 2`` is constant along each row of fixed ``x`` and
    linear interpolation reduces to ``2^d2`` weighted gathers per row.
    Sources are added in a fixed order.
    """
    grid = f.grid
    d1, d2 = g.d1, g.d2
    shape = grid.shape
    xshape, ushape = shape[:d1], shape[d1:]
    nxr = int(np.prod(xshape))
    spacing = np.asarray(grid.spacing, dtype=float)
    du = spacing[d1:]
    H = h.values.reshape(nxr, *ushape)
    out = np.zeros((nxr,) + tuple(ushape), dtype=complex)
    xpts = grid.points()[::int(np.prod(ushape)), :d1]  # one row per x node
    xidx = np.stack(np.unravel_index(np.arange(nxr), xshape), 1)
    uidx = np.stack(np.meshgrid(*[np.arange(n) for n in ushape], indexing="ij"), 0)
    fv = f.values.ravel()
    src = np.flatnonzero(fv)
    cell = grid.cell_measure
    for s in src:
        sidx = np.array(np.unravel_index(s, shape))
        xs = xpts[np.ravel_multi_index(tuple(sidx[:d1]), xshape)]
        # rows whose difference x - x_s stays on the grid
        qx = xidx - sidx[:d1] + offset[:d1]
        okx = np.all((qx >= 0) & (qx < np.array(xshape)), axis=1)
        rows = np.flatnonzero(okx)
        if rows.size == 0:
            continue
        qrow = np.ravel_multi_index(tuple(qx[rows].T), xshape)
        # fractional index shift in the centre, per row
        shift = (-sidx[d1:] + offset[d1:])[None, :] - 0.5 * bracket(g, xs, xpts[rows]) / du
        r = np.rint(shift)
        shift = np.where(np.abs(shift - r) < 1e-9, r, shift)
        i0 = np.floor(shift).astype(np.int64)
        frac = shift - i0
        acc = np.zeros((rows.size,) + tuple(ushape), dtype=H.dtype)
        for corner in range(1 << d2):
            offs = np.array([(corner >> a) & 1 for a in range(d2)])
            w = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=1)
            if not np.any(w):
                continue
            idx = [uidx[k][None] + (i0[:, k] + offs[k]).reshape((-1,) + (1,) * d2)
                   for k in range(d2)]
            ok = np.ones(idx[0].shape, dtype=bool)
            for k in range(d2):
                ok &= (idx[k] >= 0) & (idx[k] < ushape[k])
                idx[k] = np.clip(idx[k], 0, ushape[k] - 1)
            vals = H[(qrow.reshape((-1,) + (1,) * d2),) + tuple(idx)]
            acc += w.reshape((-1,) + (1,) * d2) * np.where(ok, vals, 0)
        out[rows] += fv[s] * acc
    return (out * cell).reshape(-1)
