import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stratlie import (
    Grid,
    KernelEvaluator,
    Multiplier,
    QuadratureSpec,
    ScalePartition,
    bump,
    builtin_group,
    cap_partition,
    dyadic_multiplier_pieces,
    evaluate_kernel,
    smooth_step,
    sphere_rule,
)
from stratlie.sphere import random_sphere, sphere_area

from .oracles import heisenberg_axis_kernel

F = Multiplier.canonical_bump()
chi = ScalePartition()


def test_profiles():
    t = np.linspace(-3, 3, 601)
    s = smooth_step(t)
    assert np.all((s >= 0) & (s <= 1))
    assert np.all(s[np.abs(t) <= 1] == 1) and np.all(s[np.abs(t) >= 2] == 0)
    b = bump(t)
    assert np.all(b[np.abs(t) >= 1] == 0) and b.max() == pytest.approx(1.0)


@given(st.floats(1e-3, 1e3))
def test_dyadic_partition_sums_to_one(t):
    total = sum(chi.chi_l(ell, t) for ell in chi.bands_for(np.array([t])))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_dyadic_partition_dense():
    t = np.geomspace(1e-3, 1e3, 10_000)
    total = sum(chi.chi_l(ell, t) for ell in chi.bands_for(t))
    assert np.abs(total - 1).max() <= 1e-12


@pytest.mark.parametrize("d2,delta", [(2, 0.4), (3, 0.5), (4, 0.9)])
def test_cap_partition_of_unity(d2, delta, rng):
    part = cap_partition(d2, delta)
    w = random_sphere(d2, 10_000, rng)
    z = part.zeta(w)
    assert np.abs(z.sum(axis=1) - 1).max() <= 1e-12
    assert np.all(z >= 0)
    # each zeta_j lives within twice the cap radius of its center
    ang = np.arccos(np.clip(w @ part.centers.T, -1, 1))
    assert np.all(z[ang > part.support_angle + 1e-12] == 0)
    # zero-homogeneous extension
    assert np.allclose(part.zeta(3.7 * w[:10]), z[:10])


def test_cap_partition_trivial_and_counts():
    assert len(cap_partition(3, np.pi)) == 1
    assert len(cap_partition(2, 0.5)) == int(np.ceil(2 * np.pi / 0.5))
    n1, n2 = len(cap_partition(3, 0.4)), len(cap_partition(3, 0.2))
    assert 3 < n2 / n1 < 5  # about delta^-(d2-1)
    with pytest.raises(ValueError):
        cap_partition(3, 0.0)


def test_dyadic_reconstruction():
    pieces = dyadic_multiplier_pieces(F, 8, half_width=16.0)
    total = sum(p.full_values for p in pieces)
    ref = F(np.abs(pieces[0].full_t))
    assert np.abs(total - ref).max() <= 1e-10
    assert [p.iota for p in pieces] == list(range(-1, 9))


def test_dyadic_pieces_reject_bad_support():
    G = Multiplier(lambda lam: np.ones_like(lam), (0.1, 3.0), False, "box")
    with pytest.raises(ValueError, match="vanish"):
        dyadic_multiplier_pieces(G, 4)


def test_multiplier_basics():
    lam = np.linspace(0, 3, 31)
    assert np.all(F(lam)[(lam < 0.5) | (lam > 2)] == 0)
    assert np.allclose((F + F.scaled(2.0))(lam), 3 * F(lam))
    G = Multiplier.from_samples(lam, F(lam))
    assert np.allclose(G(lam), F(lam))
    with pytest.raises(ValueError):
        Multiplier(lambda x: x, (2.0, 1.0))


@pytest.mark.parametrize("d2", [1, 2, 3, 4])
def test_sphere_rule_integrates_polynomials(d2):
    pts, w = sphere_rule(d2, 12)
    assert w.sum() == pytest.approx(sphere_area(d2) if d2 > 1 else 2.0, rel=1e-12)
    if d2 > 1:
        # int omega_1^2 = |S| / d2
        assert np.sum(w * pts[:, 0] ** 2) == pytest.approx(sphere_area(d2) / d2, rel=1e-10)


def test_quadrature_spec_json():
    q = QuadratureSpec.from_json('{"radial": 40, "sphere": 20}')
    assert q == QuadratureSpec(40, 20, 24, 33)
    assert QuadratureSpec.from_json(json.dumps(q.to_dict())) == q
    with pytest.raises(ValueError):
        QuadratureSpec.from_json('{"bogus": 1}')


@pytest.mark.parametrize("ell", [0, 1])
def test_heisenberg_axis_kernel_matches_quadrature(ell):
    g = builtin_group("heisenberg", 1)
    u = np.linspace(-4, 4, 9)
    ev = KernelEvaluator(g, F, chi, ell, None)
    got = ev.synthesize(np.zeros((1, 2)), u[:, None]).ravel()
    ref = np.array([heisenberg_axis_kernel(F, chi, ell, t) for t in u])
    assert np.abs(got - ref).max() <= 1e-3 * np.abs(ref).max()


def test_kernel_symmetry_zero_and_linearity():
    g = builtin_group("heisenberg", 1)
    grid = Grid(((-2, 2, 5), (-2, 2, 5), (-3, 3, 7)))
    K = evaluate_kernel(g, F, chi, 0, None, grid)
    # real F gives a self-adjoint operator; with radial fibers K(x, -u) = conj K(x, u)
    assert np.abs(K.values[:, :, ::-1] - K.values.conj()).max() <= 1e-12
    assert np.all(evaluate_kernel(g, Multiplier.zero(), chi, 0, None, grid).values == 0)
    K2 = evaluate_kernel(g, F.scaled(2.0), chi, 0, None, grid)
    assert np.allclose(K2.values, 2 * K.values, atol=1e-15)
    meta = json.loads(K.metadata_json())
    assert "quadrature" in meta and "timing" in meta
    assert K.to_csv().splitlines()[0] == "x1,x2,u1,re,im"


def test_caps_sum_to_uncapped_kernel():
    g = builtin_group("heisenberg_reiter", 1, 2)
    part = cap_partition(2, 1.2)
    x = np.array([[0.3, -0.2, 0.5], [0.0, 0.0, 0.0]])
    mu = np.array([[0.7, 0.2], [-0.4, 0.9], [0.1, -1.1]])
    full = KernelEvaluator(g, F, chi, 0, None).fiber_at(x, mu)
    parts = sum(KernelEvaluator(g, F, chi, 0, (part, j)).fiber_at(x, mu) for j in range(len(part)))
    assert np.allclose(parts, full, atol=1e-12)

