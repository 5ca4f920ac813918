"""
Spectral theory of the matrix family ``mu -> J_mu``.

For ``mu != 0`` the symmetric positive semidefinite matrix ``-J_mu^2``
splits as ``sum_n b_n^2 P_n`` with distinct ``b_1 > b_2 > ... > 0`` and
mutually orthogonal projections ``P_n`` of even rank ``2 r_n``.  The kernel
projection ``P_0`` completes the resolution of the identity.

This module computes that decomposition, checks the structural hypotheses
used by the kernel formulas (block decomposition, bracket-free kernels,
Métivier and Heisenberg-type properties), measures the Lipschitz constant
of ``mu -> P_0`` on the sphere, and does the exact exponent arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .group import TwoStepGroup
from .sphere import DEFAULT_SEED, random_sphere, sphere_samples

__all__ = [
    "ClusteringError",
    "SpectralDecomposition",
    "AssumptionReport",
    "GroupClass",
    "ExponentTable",
    "j_matrix",
    "spectral_decompose",
    "kernel_projection",
    "projection_lipschitz_constant",
    "check_assumption_A",
    "check_assumption_B",
    "classify_group",
    "stein_tomas",
    "stein_tomas_conjugate",
    "critical_exponent",
    "exponents",
]

TOL_CLUSTER = 1e-6
TOL_PROJ = 1e-9


class ClusteringError(ArithmeticError):
    """Eigenvalue gaps fall in the ambiguity band; choose another tolerance."""


def j_matrix(g: TwoStepGroup, mu) -> np.ndarray:
    """``J_mu = sum_k mu_k J_k``."""
    return g.j_matrix(mu)


@dataclass(frozen=True)
class SpectralDecomposition:
    """``-J_mu^2 = sum_n b[n]^2 P[n]`` together with the kernel projection."""

    mu: np.ndarray
    b: np.ndarray
    P: tuple[np.ndarray, ...]
    P0: np.ndarray
    ranks: tuple[int, ...]
    r0: int
    bases: tuple[np.ndarray, ...] = field(repr=False, default=())
    kernel_basis: np.ndarray | None = field(repr=False, default=None)

    @property
    def r(self) -> tuple[int, ...]:
        """Half ranks ``r_n``."""
        return tuple(k // 2 for k in self.ranks)

    @property
    def N(self) -> int:
        return len(self.b)

    @property
    def dbar1(self) -> int:
        return int(sum(self.ranks))

    def scaled(self, t: float) -> "SpectralDecomposition":
        """Decomposition at ``t * mu`` for ``t > 0`` (b is 1-homogeneous)."""
        return SpectralDecomposition(self.mu * t, self.b * t, self.P, self.P0,
                                     self.ranks, self.r0, self.bases, self.kernel_basis)

    def reconstruct(self) -> np.ndarray:
        """``sum_n b_n^2 P_n``, which should equal ``-J_mu^2``."""
        out = np.zeros_like(self.P0)
        for bn, Pn in zip(self.b, self.P):
            out += bn * bn * Pn
        return out

    def to_dict(self) -> dict:
        return {
            "mu": self.mu.tolist(),
            "b": self.b.tolist(),
            "ranks": list(self.ranks),
            "r0": self.r0,
            "P": [P.tolist() for P in self.P],
            "P0": self.P0.tolist(),
        }


def _polar(V: np.ndarray) -> np.ndarray:
    """Nearest matrix with orthonormal columns."""
    if V.shape[1] == 0:
        return V
    U, _, Wt = np.linalg.svd(V, full_matrices=False)
    return U @ Wt


def _projection(V: np.ndarray) -> np.ndarray:
    P = V @ V.T
    return 0.5 * (P + P.T)


def spectral_decompose(g: TwoStepGroup, mu, tol: float = TOL_CLUSTER) -> SpectralDecomposition:
    """Eigen-decompose ``-J_mu^2`` into clusters.

    Parameters
    ----------
    g : TwoStepGroup
    mu : array_like, shape (d2,)
        Nonzero central frequency.
    tol : float
        Relative gap below which neighbouring eigenvalues are merged.
        Gaps in ``[tol, 10 tol]`` are ambiguous and raise
        :class:`ClusteringError`.

    Returns
    -------
    SpectralDecomposition
    """
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (g.d2,):
        raise ValueError(f"mu must have length {g.d2}")
    if not np.any(mu):
        raise ValueError("mu must be nonzero")
    J = g.j_matrix(mu)
    M = -(J @ J)
    M = 0.5 * (M + M.T)
    evals, evecs = np.linalg.eigh(M)
    scale = float(evals[-1])
    if not scale > 0:
        raise ValueError("J_mu vanishes; the J matrices must be independent")
    rel = evals / scale
    amb = (rel > tol) & (rel <= 10 * tol)
    if np.any(amb):
        raise ClusteringError(
            f"eigenvalue {evals[amb][0]:.3e} sits in the kernel ambiguity band "
            f"[{tol:g}, {10 * tol:g}] x |J_mu|^2; use a different tol"
        )
    kern = rel <= tol
    r0 = int(np.count_nonzero(kern))
    nz = np.flatnonzero(~kern)[::-1]  # descending
    clusters: list[list[int]] = []
    for i in nz:
        if clusters:
            prev = evals[clusters[-1][-1]]
            gap = (prev - evals[i]) / prev
            if gap < tol:
                clusters[-1].append(i)
                continue
            if gap <= 10 * tol:
                raise ClusteringError(
                    f"relative eigenvalue gap {gap:.3e} lies in [{tol:g}, {10 * tol:g}]; "
                    "use a different tol"
                )
        clusters.append([i])
    b, P, bases, ranks = [], [], [], []
    for c in clusters:
        if len(c) % 2:
            raise ClusteringError(
                f"cluster of odd size {len(c)} at eigenvalue {evals[c[0]]:.6e}; "
                "the matrix is not numerically skew or tol is too small"
            )
        V = _polar(evecs[:, c])
        b.append(np.sqrt(np.mean(evals[c])))
        P.append(_projection(V))
        bases.append(V)
        ranks.append(len(c))
    K = _polar(evecs[:, np.flatnonzero(kern)])
    return SpectralDecomposition(
        mu=mu.copy(),
        b=np.array(b),
        P=tuple(P),
        P0=_projection(K) if r0 else np.zeros((g.d1, g.d1)),
        ranks=tuple(ranks),
        r0=r0,
        bases=tuple(bases),
        kernel_basis=K,
    )


def _memo(g: TwoStepGroup) -> dict:
    m = getattr(g, "_stratlie_memo", None)
    if m is None:
        m = {}
        g._stratlie_memo = m
    return m


def _r0_profile(g: TwoStepGroup, n: int = 64, tol: float = TOL_CLUSTER) -> set[int]:
    key = ("r0", n, tol)
    memo = _memo(g)
    if key not in memo:
        memo[key] = {spectral_decompose(g, w, tol).r0 for w in sphere_samples(g.d2, n)}
    return memo[key]


def kernel_projection(g: TwoStepGroup, mu, tol: float = TOL_CLUSTER,
                      homogeneity_tol: float = 1e-9) -> np.ndarray:
    """Orthogonal projection onto ``ker J_mu``.

    Checks that ``dim ker J_mu`` is constant over a sphere sample and that
    the projection is unchanged under ``mu -> t mu`` for ``t = 1/2, 2``.
    """
    if len(_r0_profile(g, tol=tol)) != 1:
        raise ValueError(f"dim ker J_mu is not constant on the sphere: {_r0_profile(g, tol=tol)}")
    dec = spectral_decompose(g, mu, tol)
    for t in (0.5, 2.0):
        other = spectral_decompose(g, t * np.asarray(mu, dtype=float), tol).P0
        err = np.max(np.abs(other - dec.P0))
        if err > homogeneity_tol:
            raise ArithmeticError(f"P0 not homogeneous of degree 0 (t={t}, error {err:.2e})")
    return dec.P0


def projection_lipschitz_constant(g: TwoStepGroup, sphere_samples_n: int = 200,
                                  seed: int = DEFAULT_SEED, tol: float = TOL_CLUSTER) -> float:
    """Empirical Lipschitz constant of ``mu -> P_0^mu`` on the unit sphere.

    The maximum of ``|P0(mu) - P0(mu')|_op / |mu - mu'|`` over all pairs of a
    deterministic sphere set, refined by seeded random pairs clustered
    around the maximizing pair at shrinking separations.
    """
    pts = sphere_samples(g.d2, sphere_samples_n, seed)
    decs = [spectral_decompose(g, w, tol) for w in pts]
    r0s = {d.r0 for d in decs}
    if len(r0s) != 1:
        wit = [pts[i].tolist() for i, d in enumerate(decs) if d.r0 != decs[0].r0][:3]
        raise ValueError(f"dim ker J_mu varies over the sphere ({sorted(r0s)}); witnesses {wit}")
    P0 = np.stack([d.P0 for d in decs])
    if not np.any(P0):
        return 0.0
    best, arg = 0.0, (0, 1)
    for i in range(len(pts)):
        diff = P0[i + 1:] - P0[i]
        if diff.shape[0] == 0:
            continue
        num = np.linalg.norm(diff, ord=2, axis=(1, 2))
        den = np.linalg.norm(pts[i + 1:] - pts[i], axis=1)
        ratio = num / den
        j = int(np.argmax(ratio))
        if ratio[j] > best:
            best, arg = float(ratio[j]), (i, i + 1 + j)
    rng = np.random.default_rng(seed)
    for eps in (1e-1, 3e-2, 1e-2, 1e-3, 1e-4):
        for base in (pts[arg[0]], pts[arg[1]]):
            for _ in range(16):
                v = base + eps * rng.standard_normal(g.d2)
                v /= np.linalg.norm(v)
                w = base + eps * rng.standard_normal(g.d2)
                w /= np.linalg.norm(w)
                den = np.linalg.norm(v - w)
                if den == 0:
                    continue
                num = np.linalg.norm(spectral_decompose(g, v, tol).P0
                                     - spectral_decompose(g, w, tol).P0, ord=2)
                if num / den > best:
                    best = float(num / den)
    return best


@dataclass
class AssumptionReport:
    """Verdict carrier for the structural checks."""

    holds: bool
    samples: list
    worst_residual: float
    witnesses: list
    notes: str = ""
    tolerance: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "holds": self.holds,
            "samples": len(self.samples),
            "worstResidual": self.worst_residual,
            "tolerance": self.tolerance,
            "witnesses": self.witnesses,
            "notes": self.notes,
            **self.extra,
        }


def _unit_samples(g: TwoStepGroup, samples) -> np.ndarray:
    if isinstance(samples, (int, np.integer)):
        return sphere_samples(g.d2, int(samples))
    pts = np.asarray(samples, dtype=float)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def check_assumption_A(g: TwoStepGroup, samples=500, tol: float = TOL_PROJ,
                       tol_cluster: float = TOL_CLUSTER) -> AssumptionReport:
    """Check the block hypothesis on the candidate projections ``g.blocks``.

    For every sampled unit ``mu`` and every block ``P``: ``J_mu`` commutes
    with ``P``; ``J_mu^2 P`` has a ``mu``-independent even rank ``2 r_n``;
    and ``-J_mu^2`` restricted to the range of ``P`` has a single nonzero
    eigenvalue.
    """
    if g.blocks is None:
        raise ValueError(
            "the group carries no candidate block projections; supply 'blocks' "
            "(automatic discovery is not supported)"
        )
    pts = _unit_samples(g, samples)
    nb = len(g.blocks)
    bases = []
    for P in g.blocks:
        w, V = np.linalg.eigh(P)
        bases.append(V[:, w > 0.5])
    worst = 0.0
    worst_spread = 0.0
    witnesses = []
    ranks_seen: list[set[int]] = [set() for _ in range(nb)]
    for w in pts:
        J = g.j_matrix(w)
        s = np.linalg.norm(J, 2)
        J2 = J @ J
        for n, P in enumerate(g.blocks):
            comm = np.max(np.abs(J @ P - P @ J)) / s
            sv = np.linalg.svd(J2 @ P, compute_uv=False)
            rank = int(np.count_nonzero(sv > 1e-8 * s * s))
            ranks_seen[n].add(rank)
            Q = bases[n]
            ev = np.linalg.eigvalsh(-(Q.T @ J2 @ Q))
            nzev = ev[ev > 1e-8 * s * s]
            spread = 0.0 if nzev.size == 0 else (nzev.max() - nzev.min()) / nzev.max()
            worst = max(worst, comm)
            worst_spread = max(worst_spread, spread)
            if comm > tol:
                witnesses.append({"mu": w.tolist(), "block": n, "commutator": float(comm)})
            if rank == 0 or rank % 2:
                witnesses.append({"mu": w.tolist(), "block": n, "rank": rank})
            if spread > tol_cluster:
                witnesses.append({"mu": w.tolist(), "block": n, "eigenvalueSpread": float(spread)})
    for n, rs in enumerate(ranks_seen):
        if len(rs) > 1:
            witnesses.append({"block": n, "ranksSeen": sorted(rs)})
    ranks = [min(rs) for rs in ranks_seen]
    holds = worst <= tol and not witnesses
    return AssumptionReport(
        holds=holds,
        samples=pts.tolist(),
        worst_residual=float(worst),
        witnesses=witnesses[:20],
        notes=f"{nb} block(s); ranks {ranks}",
        tolerance=tol,
        extra={"ranks": ranks, "r": [k // 2 for k in ranks], "dbar1": int(sum(ranks)),
               "worstEigenvalueSpread": float(worst_spread)},
    )


def _special_directions(d2: int) -> np.ndarray:
    """Coordinate axes and normalized pairwise sums/differences."""
    E = np.eye(d2)
    rows = [E, -E]
    for i in range(d2):
        for j in range(i + 1, d2):
            for s in (1.0, -1.0):
                v = E[i] + s * E[j]
                rows.append((v / np.linalg.norm(v))[None])
    return np.vstack(rows)


def check_assumption_B(g: TwoStepGroup, samples=500, tol: float = TOL_PROJ) -> AssumptionReport:
    """Check that kernel vectors of each sampled ``J_mu0`` bracket trivially.

    Samples are the sphere set plus coordinate axes and their pairwise
    diagonals, since kernel jumps of block-built groups sit on coordinate
    subspaces.
    """
    pts = np.vstack([_unit_samples(g, samples), _special_directions(g.d2)])
    worst = 0.0
    witnesses = []
    empty = 0
    for w in pts:
        J = g.j_matrix(w)
        U, s, Vt = np.linalg.svd(J)
        null = Vt[s <= 1e-9 * s[0]].T
        if null.shape[1] < 2:
            empty += null.shape[1] == 0
            continue
        M = np.einsum("ia,kij,jb->kab", null, g.J, null)
        val = float(np.max(np.abs(M)))
        worst = max(worst, val)
        if val > tol:
            k, a, b = np.unravel_index(np.argmax(np.abs(M)), M.shape)
            witnesses.append({
                "mu": w.tolist(), "k": int(k) + 1,
                "x": null[:, a].tolist(), "xprime": null[:, b].tolist(),
                "bracket": float(M[k, a, b]),
            })
    notes = ""
    if empty == len(pts):
        notes = "J_mu invertible at every sample; the condition holds vacuously"
    return AssumptionReport(
        holds=worst <= tol,
        samples=pts.tolist(),
        worst_residual=worst,
        witnesses=witnesses[:20],
        notes=notes,
        tolerance=tol,
    )


@dataclass
class GroupClass:
    is_metivier: bool
    is_heisenberg_type: bool
    r0: int | None
    r0_values: list[int]

    def to_dict(self) -> dict:
        return {"isMetivier": self.is_metivier, "isHeisenbergType": self.is_heisenberg_type,
                "r0": self.r0, "r0Values": self.r0_values}


def classify_group(g: TwoStepGroup, samples=500, tol: float = TOL_PROJ) -> GroupClass:
    """Métivier / Heisenberg-type classification and kernel dimension."""
    pts = _unit_samples(g, samples)
    metivier = True
    htype = True
    r0s = set()
    eye = np.eye(g.d1)
    for w in pts:
        J = g.j_matrix(w)
        s = np.linalg.svd(J, compute_uv=False)
        r0s.add(int(np.count_nonzero(s <= 1e-9 * s[0])))
        if s[-1] <= tol * s[0]:
            metivier = False
        if np.max(np.abs(J.T @ J - eye)) > tol:
            htype = False
    return GroupClass(
        is_metivier=metivier,
        is_heisenberg_type=metivier and htype,
        r0=next(iter(r0s)) if len(r0s) == 1 else None,
        r0_values=sorted(r0s),
    )


# ----------------------------------------------------------------------------
# exponent arithmetic


def _frac(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, float):
        return Fraction(v).limit_denominator(10**12)
    return Fraction(v)


def stein_tomas(n: int) -> Fraction:
    """Restriction endpoint ``2(n+1)/(n+3)`` on ``R^n``."""
    return Fraction(2 * (n + 1), n + 3)


def stein_tomas_conjugate(n: int) -> Fraction:
    """Dual exponent ``2(n+1)/(n-1)``; requires ``n >= 2``."""
    if n < 2:
        raise ValueError("the conjugate endpoint is infinite for n = 1")
    return Fraction(2 * (n + 1), n - 1)


def critical_exponent(dbar1: int, d2: int, variant: str = "derived") -> Fraction:
    """Largest ``p`` allowed by the final balance condition.

    ``variant="derived"`` returns
    ``(2 dbar1 (d2-1) + 2 d2 (d2+1)) / (dbar1 (d2-1) + 3 d2^2 + 1)``, the
    value obtained by solving the balance condition for ``p``.
    ``variant="printed"`` returns the variant whose numerator carries
    ``dbar1 (d2-1)`` instead of ``2 dbar1 (d2-1)``.

    Raises
    ------
    ValueError
        If ``dbar1 < d2 - 1`` (the rank condition ``dbar1 >= d2 - 1`` fails).
    """
    if d2 < 1:
        raise ValueError("d2 must be at least 1")
    if dbar1 < d2 - 1:
        raise ValueError(f"rank condition dbar1 >= d2 - 1 violated: dbar1={dbar1}, d2={d2}")
    den = dbar1 * (d2 - 1) + 3 * d2 * d2 + 1
    if variant == "derived":
        num = 2 * dbar1 * (d2 - 1) + 2 * d2 * (d2 + 1)
    elif variant == "printed":
        num = dbar1 * (d2 - 1) + 2 * d2 * (d2 + 1)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return Fraction(num, den)


def _inv(v: Fraction) -> Fraction | None:
    return None if v == 0 else 1 / v


@dataclass(frozen=True)
class ExponentTable:
    """Exact exponent bookkeeping for a given ``p``.

    ``None`` marks an infinite or undefined entry.
    """

    p: Fraction
    p_prime: Fraction | None
    q: Fraction | None
    st_d1: Fraction
    st_d2: Fraction
    st_min: Fraction
    st_d2_prime: Fraction | None
    theta_p: Fraction | None
    vartheta_p: Fraction | None
    s_threshold: Fraction
    p_critical: Fraction | None
    dbar1: int
    d2: int
    final_lhs: Fraction | None
    final_condition: bool | None
    final_condition_equivalent: bool | None

    def to_dict(self) -> dict:
        def r(v):
            if v is None or isinstance(v, (bool, int)) and not isinstance(v, Fraction):
                return v
            return {"exact": str(v), "value": float(v)}

        return {
            "p": r(self.p), "pPrime": r(self.p_prime), "q": r(self.q),
            "stD1": r(self.st_d1), "stD2": r(self.st_d2), "stMin": r(self.st_min),
            "stD2Prime": r(self.st_d2_prime), "thetaP": r(self.theta_p),
            "varthetaP": r(self.vartheta_p), "sThreshold": r(self.s_threshold),
            "pCritical": r(self.p_critical), "dbar1": self.dbar1, "d2": self.d2,
            "finalConditionLhs": r(self.final_lhs), "finalCondition": self.final_condition,
            "finalConditionEquivalent": self.final_condition_equivalent,
        }


def exponents(p, d1: int, d2: int, r0: int = 0) -> ExponentTable:
    """Exponent table for ``1 <= p <= 2`` on a group with the given dimensions.

    ``theta_p`` and ``vartheta_p`` solve ``1/p = (1-t) + t/ST`` with ``ST``
    the smaller of the two endpoints and the second-layer endpoint,
    respectively.  The balance condition
    ``dbar1/q - vartheta_p d2/2 - (d2-1)/2 >= 0`` (``dbar1 = d1 - r0``) is
    evaluated and compared with its closed form
    ``1/p' <= (dbar1 - (d2-1)) / (2 dbar1 + d2 ST(d2)')``.
    """
    p = _frac(p)
    if not (1 <= p <= 2):
        raise ValueError(f"p must lie in [1, 2], got {p}")
    inv_p = 1 / p
    inv_pp = 1 - inv_p
    st1, st2 = stein_tomas(d1), stein_tomas(d2)
    stmin = min(st1, st2)

    def theta(st: Fraction) -> Fraction | None:
        a = 1 - 1 / st
        if a == 0:
            return Fraction(0) if inv_pp == 0 else None
        return inv_pp / a

    st2p = stein_tomas_conjugate(d2) if d2 >= 2 else None
    dbar1 = d1 - r0
    vt = theta(st2)
    inv_q = inv_p - Fraction(1, 2)
    if vt is not None and d2 >= 2:
        lhs = dbar1 * inv_q - vt * Fraction(d2, 2) - Fraction(d2 - 1, 2)
        cond = lhs >= 0
        closed = inv_pp <= Fraction(dbar1 - (d2 - 1), 2 * dbar1 + d2 * st2p)
        equivalent = cond == closed
    else:
        lhs, cond, equivalent = None, None, None
    try:
        pc = critical_exponent(dbar1, d2)
    except ValueError:
        pc = None
    return ExponentTable(
        p=p, p_prime=_inv(inv_pp), q=_inv(inv_q),
        st_d1=st1, st_d2=st2, st_min=stmin, st_d2_prime=st2p,
        theta_p=theta(stmin), vartheta_p=vt,
        s_threshold=(d1 + d2) * inv_q,
        p_critical=pc, dbar1=dbar1, d2=d2,
        final_lhs=lhs, final_condition=cond, final_condition_equivalent=equivalent,
    )
