"""
A tour of stratlie
==================

Build a few two-step groups, look at the spectral structure of their
bracket matrices, compute the critical exponents exactly, then sample a
localized multiplier kernel and compare its L2 norm with the closed form.

Runs in well under a minute.
"""
import numpy as np

from stratlie import (
    Grid,
    Multiplier,
    ScalePartition,
    builtin_group,
    cap_partition,
    check_assumption_B,
    classify_group,
    critical_exponent,
    evaluate_kernel,
    exponents,
    plancherel_closed_form,
    spectral_decompose,
)
from stratlie.group import GroupPoint, homogeneous_norm, multiply, shared_center_reiter

np.set_printoptions(precision=4, suppress=True)

# Groups and the group law
# ------------------------
# The Heisenberg group H_1 has a one-dimensional centre.  Two points that do
# not commute differ in the central coordinate by their bracket.
h1 = builtin_group("heisenberg", 1)
p = GroupPoint(np.array([1.0, 0.0]), np.array([0.0]))
q = GroupPoint(np.array([0.0, 1.0]), np.array([0.0]))
print("pq =", multiply(h1, p, q))
print("qp =", multiply(h1, q, p))
print("|pq|_G =", homogeneous_norm(multiply(h1, p, q)))

# Classification
# --------------
# Heisenberg groups are Métivier (J_mu invertible) and of H-type.  The
# Heisenberg-Reiter groups have a kernel of dimension (d2 - 1) per block, and
# the glued N_{3,2} groups a one-dimensional kernel per block.
for spec in [("heisenberg", 2), ("heisenberg_reiter", 2, 2), ("n32_glued", 3)]:
    g = builtin_group(*spec)
    c = classify_group(g, 200)
    print(f"{g.name:<24} d1={g.d1} d2={g.d2}  Metivier={c.is_metivier!s:<5} "
          f"H-type={c.is_heisenberg_type!s:<5} r0={c.r0}")

# Spectral decomposition
# ----------------------
# -J_mu^2 = sum b_n^2 P_n.  On the glued group the single nonzero eigenvalue
# is |mu| and the kernel projection is the rank-one projection onto mu.
g = builtin_group("n32_glued", 1)
mu = np.array([0.3, -1.2, 0.5])
d = spectral_decompose(g, mu)
print("b =", d.b, " |mu| =", np.linalg.norm(mu))
print("P0 =\n", d.P0)
print("mu mu^T / |mu|^2 =\n", np.outer(mu, mu) / (mu @ mu))

# Exponents in exact arithmetic
# -----------------------------
for N in (1, 2, 3):
    print(f"glued N_{{3,2}} x {N}: critical p = {critical_exponent(2 * N, 3)}")
t = exponents(critical_exponent(4, 3), 6, 3, r0=2)
print("exponent table at the critical p:", t.to_dict())

# The commuting-kernel hypothesis
# -------------------------------
rep = check_assumption_B(shared_center_reiter(), 100)
print("kernel vectors commute on the shared-centre group:", rep.holds,
      f"(worst bracket {rep.worst_residual:.3g})")

# A localized kernel and its L2 norm
# ----------------------------------
# Sample the kernel of F(L) chi(2^l U) zeta_j(U) on H_1 with the canonical
# bump F, then compare the grid norm with the closed-form Plancherel value.
F = Multiplier.canonical_bump()
chi = ScalePartition()
grid = Grid.symmetric(2, 1, 8.0, 65, 24.0, 129)
K = evaluate_kernel(h1, F, chi, 0, None, grid)
print(f"grid L2 norm {K.l2_norm():.6f}  closed form {plancherel_closed_form(h1, F, chi, 0):.6f}")

# The same with an angular cap on the two-dimensional centre of H_{1,2}.
hr = builtin_group("heisenberg_reiter", 1, 2)
caps = cap_partition(2, np.pi / 4)
print(f"{len(caps)} caps of size pi/4 on the circle")
closed = [plancherel_closed_form(hr, F, chi, 0, (caps, j)) for j in range(len(caps))]
print("per-cap closed-form norms:", np.array(closed))
