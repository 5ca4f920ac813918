import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from stratlie import (
    Check,
    ExperimentReport,
    Grid,
    GridFunction,
    Multiplier,
    ScalePartition,
    builtin_group,
    calibrate_radius,
    calibrate_threshold,
    localization_profile,
    norm_M2,
    plancherel_closed_form,
    plancherel_crosscheck,
    propagation_profile,
    propagation_support_fraction,
    restriction_ratio_experiment,
    sobolev_embedding_check,
    sobolev_norm,
    young_ratio,
)
from stratlie.group import shared_center_reiter
from stratlie.kernels import bump, min_scale_ell0
from stratlie.verify import l2_norm, x_rule

F = Multiplier.canonical_bump()
chi = ScalePartition()


# ----------------------------------------------------------------------------
# multiplier norms


def test_norm_M2_hand_values():
    box = Multiplier(lambda lam: (lam < 1).astype(float), (0.0, 1.0), False, "box")
    assert norm_M2(box, 2) == pytest.approx(1.0)
    assert norm_M2(Multiplier.zero(), 3) == 0.0
    with pytest.raises(ValueError):
        norm_M2(box, 0)


@settings(max_examples=30)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=8), st.sampled_from([1, 2, 4, 8]))
def test_L2_below_M2_for_piecewise(levels, M):
    edges = np.linspace(0.5, 2.0, len(levels) + 1)

    def f(lam):
        i = np.clip(np.searchsorted(edges, lam, side="right") - 1, 0, len(levels) - 1)
        return np.asarray(levels)[i]

    G = Multiplier(f, (0.5, 2.0), False, "steps")
    assert l2_norm(G) <= norm_M2(G, M) * (1 + 1e-9)


def test_sobolev_norm_oracles():
    assert sobolev_norm(F, 0.0) == pytest.approx(l2_norm(F), rel=1e-10)
    # Parseval: int (1 + tau^2)|F^|^2 / 2 pi = ||F||^2 + ||F'||^2
    h = 1e-6
    dF = lambda t: (bump((t + h - 1.25) / 0.75) - bump((t - h - 1.25) / 0.75)) / (2 * h)
    ref = quad(lambda t: F(np.array(t)) ** 2 + dF(np.array(t)) ** 2, 0.5, 2.0, limit=200)[0]
    assert sobolev_norm(F, 1.0) ** 2 / ref == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        sobolev_norm(F, -1.0)


def test_sobolev_embedding_constant_bounded():
    rep = sobolev_embedding_check(F, 1.0, (1, 2, 4, 8, 16, 32))
    assert all(c.verdict == "pass" for c in rep.checks if c.name.startswith("L2 <= M2"))
    C = np.array(rep.measured["C"])
    # the constant does not depend on M: it rises towards ||F||_2 / ||F||_2 = 1
    assert np.all(np.diff(C) > 0) and C.max() < 1


@pytest.mark.xfail(strict=True, reason="the embedding is loose at small M: C_s(1) / C_s(8) "
                                       "is about 0.53, outside a 20% band about the mean")
def test_sobolev_embedding_constant_within_20_percent():
    rep = sobolev_embedding_check(F, 1.0)
    assert rep.passed, rep.to_text()


# ----------------------------------------------------------------------------
# Plancherel


def heisenberg_closed_form(ell: int) -> float:
    """1-D oracle on H_1: (2 pi)^-2 * 2 int sum_k |F((2k+1) rho) chi(2^l rho)|^2 rho drho."""
    def integrand(rho):
        k = np.arange(int(2.0 / rho) + 1)
        return np.sum(F((2 * k + 1) * rho) ** 2) * chi.chi_l(ell, rho) ** 2 * rho

    lo, hi = 2.0 ** -ell * 0.5, 2.0 ** -ell * 2.0
    brk = [2.0 / (2 * k + 1) for k in range(200) if lo < 2.0 / (2 * k + 1) < hi]
    brk += [0.5 / (2 * k + 1) for k in range(200) if lo < 0.5 / (2 * k + 1) < hi]
    val = quad(integrand, lo, hi, limit=2000, points=sorted(brk)[:100], epsabs=0, epsrel=1e-12)[0]
    return math.sqrt(2 * val / (2 * np.pi) ** 2)


@pytest.mark.parametrize("ell", [-1, 0, 1, 2])
def test_closed_form_matches_1d_quadrature_on_H1(ell):
    g = builtin_group("heisenberg", 1)
    assert plancherel_closed_form(g, F, chi, ell) == pytest.approx(
        heisenberg_closed_form(ell), rel=1e-7)


def test_closed_form_zero_and_level_scaling():
    g = builtin_group("heisenberg", 1)
    assert plancherel_closed_form(g, Multiplier.zero(), chi, 0) == 0.0
    ell0 = min_scale_ell0(g, F.support)
    norm = [plancherel_closed_form(g, F, chi, ell) * 2.0 ** (ell * g.d2 / 2)
            for ell in range(-ell0, 7)]
    # the normalized sequence stays bounded and settles
    assert max(norm) / min(norm[ell0:]) < 2.0
    assert abs(norm[-1] / norm[-2] - 1) < 0.05


def test_crosscheck_heisenberg_and_zero():
    g = builtin_group("heisenberg", 1)
    rep = plancherel_crosscheck(g, F, chi, 0)
    assert rep.passed, rep.to_text()
    assert 0.95 <= rep.measured["ratio"] <= 1.05
    rep0 = plancherel_crosscheck(g, Multiplier.zero(), chi, 0)
    assert rep0.passed


def test_crosscheck_small_grid_is_inconclusive():
    g = builtin_group("heisenberg", 1)
    grid = Grid.symmetric(2, 1, 1.0, 5, 2.0, 9)
    rep = plancherel_crosscheck(g, F, chi, 0, grid=grid)
    assert rep.verdict == "inconclusive"


@pytest.mark.parametrize("spec", [("heisenberg", 1), ("heisenberg", 2),
                                  ("heisenberg_reiter", 1, 2)])
def test_x_rule_integrates_gaussian(spec):
    g = builtin_group(*spec)
    for reduce in (True, False):
        pts, w, planes = x_rule(g, 8.0, 0.5, reduce)
        val = np.sum(w * np.exp(-np.sum(pts ** 2, axis=1)))
        assert val == pytest.approx(np.pi ** (g.d1 / 2), rel=1e-8)
        assert bool(planes) == reduce


# ----------------------------------------------------------------------------
# propagation and calibration


@pytest.fixture(scope="module")
def h1_profile():
    return propagation_profile(builtin_group("heisenberg", 1), F, 0)


def test_propagation_fraction_monotone(h1_profile):
    frac = h1_profile["fraction"]
    assert np.all(np.diff(frac) >= -1e-12)
    assert frac[-1] <= 1 + 1e-6


def test_propagation_report(h1_profile):
    g = builtin_group("heisenberg", 1)
    rep = propagation_support_fraction(g, F, 0, 2.5, profile=h1_profile)
    assert rep.check("fraction inside ball").measured == pytest.approx(
        np.interp(2.5, h1_profile["c"], h1_profile["fraction"]))
    with pytest.raises(ValueError, match="grid"):
        propagation_support_fraction(g, F, 0, 10.0, profile=h1_profile)


def test_calibration_helpers():
    c = np.linspace(0.05, 3, 60)
    fr = [1 - np.exp(-3 * c), 1 - np.exp(-4 * c)]
    got = calibrate_radius(c, fr, 0.99, 0.05)
    assert got == pytest.approx(math.ceil(-np.log(0.01) / 3 / 0.05 - 1e-9) * 0.05)
    T = np.linspace(0, 10, 201)
    out = np.exp(-T)
    C = calibrate_threshold(T, out, 2.0, 0.01, 0.05)
    assert np.interp(C * 2.0, T, out) <= 0.01 < np.interp((C - 0.05) * 2.0, T, out)
    with pytest.raises(ValueError):
        calibrate_threshold(T, out + 1, 2.0, 0.01, 0.05)


# ----------------------------------------------------------------------------
# localization refusal and restriction


def test_second_layer_refuses_without_commuting_kernels():
    g = shared_center_reiter()
    rep = localization_profile(g, "second", C=1.0)
    assert rep.verdict == "refused"
    assert not rep.passed


def test_young_ratio_at_most_one(rng):
    g = builtin_group("heisenberg", 1)
    grid = Grid.symmetric(2, 1, 2.0, 9, 2.0, 9)
    for _ in range(5):
        f = GridFunction(g, grid, rng.random(grid.shape) * (rng.random(grid.shape) < 0.05))
        K = GridFunction(g, grid, rng.standard_normal(grid.shape))
        assert young_ratio(g, f, K) <= 1 + 1e-12


def test_restriction_needs_enough_trials():
    with pytest.raises(ValueError, match="trials"):
        restriction_ratio_experiment(builtin_group("heisenberg", 1), F, None, [0], None,
                                     trials=2)


# ----------------------------------------------------------------------------
# reports


def test_report_json_and_verdicts():
    rep = ExperimentReport("demo", {"p": 1}, {"x": np.float64(0.5), "arr": np.arange(2)},
                           [Check("a", 1.0, 1.0, 0.1, "pass"),
                            Check("b", 2.0, None, None, "info")], runtime=3.0)
    doc = json.loads(rep.to_json())
    assert "runtime" not in rep.to_json()
    assert doc["verdict"] == "pass" and doc["measured"]["arr"] == [0, 1]
    assert list(doc) == sorted(doc)
    assert rep.timing()["seconds"] == 3.0
    rep.checks.append(Check("c", 0.0, 0.0, 0.0, "inconclusive"))
    assert rep.verdict == "inconclusive"
    rep.checks.append(Check("d", 0.0, 0.0, 0.0, "fail"))
    assert rep.verdict == "fail"
    assert rep.to_csv().splitlines()[0] == "parameter,measured,reference,verdict"
    assert "DEMO" not in rep.to_text() and "demo: FAIL" in rep.to_text()
