"""One test per acceptance criterion.

Every tolerance is written out here.  Expensive profiles are computed once
per module and shared between the checks that read them.
"""
import json
import os
import subprocess
import sys
import time
from fractions import Fraction
from math import comb

import numpy as np
import pytest

from stratlie import (
    DEFAULTS,
    GOLDENS,
    LaguerreParams,
    Multiplier,
    ScalePartition,
    builtin_group,
    calibrate_radius,
    calibrate_threshold,
    cap_partition,
    check_assumption_A,
    check_assumption_B,
    classify_group,
    critical_exponent,
    dyadic_multiplier_pieces,
    j_matrix,
    laguerre_phi,
    localization_data,
    localization_profile,
    plancherel_crosscheck,
    projection_lipschitz_constant,
    propagation_covariance,
    propagation_profile,
    propagation_support_fraction,
    restriction_ratio_experiment,
    spectral_decompose,
    weighted_moments,
    weighted_plancherel_slope,
)
from stratlie.group import shared_center_reiter
from stratlie.sphere import random_sphere

from .oracles import eigen_residual_orders, laguerre_exact

F = Multiplier.canonical_bump()
chi = ScalePartition()
REGRESSION = 0.10  # calibrated constants may move by at most 10%


# ----------------------------------------------------------------------------
# 1. exponents


def test_01_exponent_reproduction():
    t0 = time.perf_counter()
    for N in range(1, 11):
        assert critical_exponent(2 * N, 3) == 2 - Fraction(8, N + 7)
    for d2 in range(2, 9):
        assert critical_exponent(d2 - 1, d2) == 1
    assert time.perf_counter() - t0 < 1.0


# ----------------------------------------------------------------------------
# 2. example matrices, built by hand from the displayed forms


def n32_display(N, mu):
    m1, m2, m3 = mu
    block = np.array([[0, -m3, m2], [m3, 0, -m1], [-m2, m1, 0]])
    return np.kron(np.eye(N), block)


def n32_square_display(mu):
    m1, m2, m3 = mu
    return np.array([[-m2 ** 2 - m3 ** 2, m1 * m2, m1 * m3],
                     [m1 * m2, -m1 ** 2 - m3 ** 2, m2 * m3],
                     [m1 * m3, m2 * m3, -m1 ** 2 - m2 ** 2]])


def hr_display(N, mu):
    d2 = mu.size
    block = np.zeros((d2 + 1, d2 + 1))
    block[:d2, d2] = mu
    block[d2, :d2] = -mu
    return np.kron(np.eye(N), block)


def test_02_example_matrices(rng):
    for _ in range(20):
        mu = rng.standard_normal(3)
        for N in (1, 2, 3):
            J = j_matrix(builtin_group("n32_glued", N), mu)
            assert np.abs(J - n32_display(N, mu)).max() <= 1e-14
        assert np.abs(J[:3, :3] @ J[:3, :3] - n32_square_display(mu)).max() <= 1e-14
        for N, d2 in [(1, 2), (2, 2), (1, 3), (3, 3)]:
            m = mu[:d2]
            J = j_matrix(builtin_group("heisenberg_reiter", N, d2), m)
            assert np.abs(J - hr_display(N, m)).max() <= 1e-14


# ----------------------------------------------------------------------------
# 3. classification


def test_03_classification():
    t0 = time.perf_counter()
    for N in (1, 2, 3):
        for d2 in (2, 3):
            g = builtin_group("heisenberg_reiter", N, d2)
            assert check_assumption_A(g, 500).holds
            assert check_assumption_B(g, 500).holds
            c = classify_group(g, 500)
            assert not c.is_metivier
            assert c.r0 == (d2 - 1) * N
        # with a one-dimensional centre the family is the Heisenberg group
        assert classify_group(builtin_group("heisenberg_reiter", N, 1), 500).is_metivier
    for n in (1, 2, 3):
        c = classify_group(builtin_group("heisenberg", n), 500)
        assert c.is_metivier and c.is_heisenberg_type
    assert time.perf_counter() - t0 < 30.0


# ----------------------------------------------------------------------------
# 4. spectral reconstruction


def test_04_spectral_reconstruction(rng):
    groups = [builtin_group(*s) for s in [("heisenberg", 1), ("heisenberg", 3), ("n32_glued", 1),
                                          ("n32_glued", 3), ("heisenberg_reiter", 1, 2),
                                          ("heisenberg_reiter", 2, 3),
                                          ("heisenberg_reiter", 3, 3)]]
    for i in range(1000):
        g = groups[i % len(groups)]
        mu = rng.standard_normal(g.d2) * 10.0 ** rng.uniform(-2, 2)
        d = spectral_decompose(g, mu)
        J = j_matrix(g, mu)
        assert np.abs(J @ J + d.reconstruct()).max() <= 1e-9 * np.abs(J).max() ** 2
        assert np.abs(d.P0 + sum(d.P) - np.eye(g.d1)).max() <= 1e-10


# ----------------------------------------------------------------------------
# 5. Lipschitz bound on the kernel projection


@pytest.mark.parametrize("spec", [("n32_glued", 1), ("heisenberg_reiter", 1, 2)])
def test_05_projection_lipschitz(spec, rng):
    g = builtin_group(*spec)
    kappa = projection_lipschitz_constant(g)
    assert np.isfinite(kappa) and kappa > 0
    # 10^4 fresh pairs: half far apart, half at small separations
    v = random_sphere(g.d2, 10_000, rng)
    w = random_sphere(g.d2, 10_000, rng)
    w[5000:] = v[5000:] + 10.0 ** rng.uniform(-4, -1, (5000, 1)) * rng.standard_normal((5000, g.d2))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    worst = 0.0
    for a, b in zip(v, w):
        num = np.linalg.norm(spectral_decompose(g, a).P0 - spectral_decompose(g, b).P0, ord=2)
        worst = max(worst, num / np.linalg.norm(a - b))
    assert worst <= 1.05 * kappa


# ----------------------------------------------------------------------------
# 6. Laguerre functions and the Hermite operator


def test_06_laguerre_hermite(rng):
    for k in range(6):
        for m in (1, 2):
            orders = eigen_residual_orders(k, m)
            assert np.all((orders >= 1.8) & (orders <= 2.2)), (k, m, orders)
    # errors are measured against the sup norm, attained at the origin
    for k in range(31):
        for m in (1, 2, 3):
            for lam in (0.5, 1.0, 2.0):
                sup = lam ** m * comb(k + m - 1, k)
                for r2 in rng.uniform(0, 40, 3):
                    ref = laguerre_exact(k, lam, m, r2)
                    got = laguerre_phi(LaguerreParams(k, lam, m), r2)
                    assert abs(got - ref) <= 1e-12 * sup, (k, m, lam, r2)


# ----------------------------------------------------------------------------
# 7. Plancherel cross-check


@pytest.mark.slow
def test_07_plancherel_crosscheck():
    t0 = time.perf_counter()
    g = builtin_group("heisenberg", 1)
    for ell in (0, 1, 2):
        rep = plancherel_crosscheck(g, F, chi, ell)
        assert 0.95 <= rep.measured["ratio"] <= 1.05, rep.to_text()
        assert rep.passed
    rep = plancherel_crosscheck(builtin_group("heisenberg_reiter", 1, 2), F, chi, 1)
    assert 0.9 <= rep.measured["ratio"] <= 1.1, rep.to_text()
    assert rep.passed
    assert time.perf_counter() - t0 < 600.0


# ----------------------------------------------------------------------------
# 8. weighted Plancherel scaling

ELLS = list(range(5))


@pytest.fixture(scope="module")
def moments():
    out = {}
    for spec in [("heisenberg", 1), ("heisenberg_reiter", 1, 2)]:
        g = builtin_group(*spec)
        out[spec] = {ell: weighted_moments(g, F, chi, ell, (0.0, 0.5, 1.0)) for ell in ELLS}
    return out


def slope_report(moments, spec, alpha, law):
    g = builtin_group(*spec)
    return weighted_plancherel_slope(g, F, chi, alpha, ELLS, law, moments=moments[spec])


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the moments grow like 2^(l(2 alpha - d2)); the stated "
                                       "law d2 - 2 alpha has the opposite sign")
@pytest.mark.parametrize("spec", [("heisenberg", 1), ("heisenberg_reiter", 1, 2)])
@pytest.mark.parametrize("alpha", [0.0, 1.0])
def test_08_weighted_slope_stated_law(moments, spec, alpha):
    rep = slope_report(moments, spec, alpha, "stated")
    assert abs(rep.measured["slope"] - (g_d2(spec) - 2 * alpha)) <= 0.3, rep.to_text()


def g_d2(spec):
    return builtin_group(*spec).d2


@pytest.mark.slow
@pytest.mark.parametrize("spec", [("heisenberg", 1), ("heisenberg_reiter", 1, 2)])
def test_08_weighted_slope_scaling_law_unweighted(moments, spec):
    rep = slope_report(moments, spec, 0.0, "scaling")
    assert abs(rep.measured["slope"] + g_d2(spec)) <= 0.3, rep.to_text()
    assert rep.passed, rep.to_text()


@pytest.mark.slow
def test_08_weighted_slope_critical_weight(moments):
    # alpha = d2 / 2: both laws predict a flat sequence
    rep = slope_report(moments, ("heisenberg", 1), 0.5, "stated")
    assert abs(rep.measured["slope"]) <= 0.3, rep.to_text()


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="at l <= 4 the alpha = 1 moments have not reached the "
                                       "asymptotic scaling (slope 0.6 on H_1, -0.3 on H_{1,2})")
@pytest.mark.parametrize("spec", [("heisenberg", 1), ("heisenberg_reiter", 1, 2)])
def test_08_weighted_slope_scaling_law_alpha_one(moments, spec):
    rep = slope_report(moments, spec, 1.0, "scaling")
    assert abs(rep.measured["slope"] - (2 - g_d2(spec))) <= 0.3, rep.to_text()


# ----------------------------------------------------------------------------
# 9. partition identities


def test_09_partition_identities(rng):
    for d2, delta in [(2, 0.3), (3, 0.4)]:
        part = cap_partition(d2, delta)
        w = random_sphere(d2, 10_000, rng)
        assert np.abs(part.zeta(w).sum(axis=1) - 1).max() <= 1e-12
    t = np.geomspace(1e-3, 1e3, 10_000)
    total = sum(chi.chi_l(ell, t) for ell in chi.bands_for(t))
    assert np.abs(total - 1).max() <= 1e-12
    pieces = dyadic_multiplier_pieces(F, 8)
    rec = sum(p.full_values for p in pieces)
    assert np.abs(rec - F(np.abs(pieces[0].full_t))).max() <= 1e-10


# ----------------------------------------------------------------------------
# 10. finite propagation


@pytest.fixture(scope="module")
def propagation_profiles():
    g = builtin_group("heisenberg", 1)
    return {iota: propagation_profile(g, F, iota) for iota in (0, 1, 2)}


def test_10_finite_propagation(propagation_profiles):
    g = builtin_group("heisenberg", 1)
    c = GOLDENS["propagation"]["heisenberg(1)"]["c"]
    for iota, prof in propagation_profiles.items():
        rep = propagation_support_fraction(g, F, iota, c, profile=prof)
        assert rep.measured["fraction"] >= 0.99, rep.to_text()
    rep = propagation_covariance(g, F, (0, 1, 2), c, profiles=propagation_profiles)
    assert rep.measured["drift"] <= 0.02 and rep.passed, rep.to_text()
    # the frozen radius is reproduced
    profs = list(propagation_profiles.values())
    again = calibrate_radius(profs[0]["c"], [p["fraction"] for p in profs], 0.99, 0.05)
    assert abs(again - c) <= REGRESSION * c


# ----------------------------------------------------------------------------
# 11. localization


def _localization(layer, key, spec):
    gold = GOLDENS["localization"][layer][key]
    g = builtin_group(*spec)
    prof = localization_data(g, layer, F, None, gold["ell"], gold["iota"])
    rep = localization_profile(g, layer, F, None, gold["ell"], gold["iota"], profile=prof)
    assert rep.measured["outside"] <= 0.01 and rep.passed, rep.to_text()
    scale = prof["scale"](DEFAULTS["localization"]["gamma"]) if callable(prof["scale"]) \
        else prof["scale"]
    again = calibrate_threshold(prof["T"], prof["outside"], scale, 0.01, 0.05)
    assert abs(again - gold["C"]) <= REGRESSION * gold["C"]


@pytest.mark.slow
def test_11_localization_first_layer():
    _localization("first", "n32_glued(1)", ("n32_glued", 1))


@pytest.mark.slow
def test_11_localization_second_layer():
    _localization("second", "heisenberg_reiter(1,2)", ("heisenberg_reiter", 1, 2))


def test_11_second_layer_refuses_on_counterexample():
    g = shared_center_reiter()
    assert not check_assumption_B(g, 200).holds
    rep = localization_profile(g, "second", F, None, 0, 2, C=100.0)
    assert rep.verdict == "refused"
    # forcing a measurement still fails: the multiplicities jump across the sphere
    with pytest.raises(ValueError, match="multiplicities"):
        localization_profile(g, "second", F, None, 0, 2, C=100.0, force=True)


# ----------------------------------------------------------------------------
# 12. restriction at p = 1


def test_12_young_exactness():
    g = builtin_group("heisenberg", 1)
    rep = restriction_ratio_experiment(g, F, chi, [0], None, p=1, trials=100, seed=12)
    assert rep.measured["youngWorst"] <= 1 + 1e-9
    assert rep.check("Young ratio").verdict == "pass"
    assert rep.inputs["trials"] == 100


# ----------------------------------------------------------------------------
# 13. determinism


@pytest.mark.parametrize("argv", [["verify", "plancherel", "--builtin", "heisenberg:1"],
                                  ["verify", "propagation", "--iota", "1"],
                                  ["verify", "sobolev"]])
def test_13_determinism(argv, tmp_path):
    outs = []
    for threads in ("1", "4"):
        path = tmp_path / f"out{threads}.json"
        env = {**os.environ, "STRATLIE_THREADS": threads}
        r = subprocess.run([sys.executable, "-m", "stratlie", *argv, "--out", str(path)],
                           env=env, capture_output=True, text=True, check=False)
        assert r.returncode in (0, 2), r.stderr
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
    json.loads(outs[0])
