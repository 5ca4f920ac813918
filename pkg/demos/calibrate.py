"""
Calibrating the experiment constants
====================================

Three experiments compare a measured mass fraction against a threshold
whose constant is only known up to size: the radius of the ball that
captures a wave-propagator piece, and the two localization thresholds.
This script measures each constant once, on a 0.05 lattice, and prints the
values frozen in ``stratlie.verify.GOLDENS``.  Rerunning it later checks
that nothing has drifted by more than the regression tolerance.

Runtime is dominated by the two localization profiles (a few minutes each).
"""
import json
import sys
import time

import numpy as np

from stratlie import (
    DEFAULTS,
    GOLDENS,
    Multiplier,
    builtin_group,
    calibrate_radius,
    calibrate_threshold,
    localization_data,
    propagation_profile,
    restriction_ratio_experiment,
)

F = Multiplier.canonical_bump()
found = {}

# Finite propagation on H_1: the piece at frequency 2^iota should live in the
# homogeneous ball of radius c 2^iota.  Take the smallest c for which every
# piece keeps 99% of its mass inside.
t0 = time.perf_counter()
g = builtin_group("heisenberg", 1)
profiles = [propagation_profile(g, F, iota) for iota in (0, 1, 2)]
c = calibrate_radius(profiles[0]["c"], [p["fraction"] for p in profiles],
                     DEFAULTS["propagation"]["fractionMin"], DEFAULTS["propagation"]["cStep"])
print(f"propagation radius c = {c:.2f}   ({time.perf_counter() - t0:.0f} s)")
for iota, p in zip((0, 1, 2), profiles):
    print(f"  iota={iota}: fraction at c = {np.interp(c, p['c'], p['fraction']):.4f}")
found[("propagation", "heisenberg(1)")] = c

# First-layer localization on the glued group: mass of one cap's kernel
# beyond |Pbar x| = C 2^l 2^(gamma iota).
L = DEFAULTS["localization"]
for layer, spec, key in [("first", ("n32_glued", 1), "n32_glued(1)"),
                         ("second", ("heisenberg_reiter", 1, 2), "heisenberg_reiter(1,2)")]:
    gold = GOLDENS["localization"][layer][key]
    t0 = time.perf_counter()
    prof = localization_data(builtin_group(*spec), layer, F, None, gold["ell"], gold["iota"])
    scale = prof["scale"](L["gamma"]) if callable(prof["scale"]) else prof["scale"]
    C = calibrate_threshold(prof["T"], prof["outside"], scale, L["outsideMax"], L["cStep"])
    print(f"{layer}-layer constant C = {C:.2f} on {key} "
          f"(l={gold['ell']}, iota={gold['iota']}, scale {scale:.4f}, "
          f"{time.perf_counter() - t0:.0f} s)")
    found[("localization", layer, key)] = C

# Restriction-type ratio at p = 1: the largest empirical constant over levels.
t0 = time.perf_counter()
rep = restriction_ratio_experiment(g, F, None, range(5), None, p=1, trials=20)
chat = max(rep.measured["cHat"])
print(f"restriction constant = {chat:.4g}, Young ratio {rep.measured['youngWorst']:.4f} "
      f"({time.perf_counter() - t0:.0f} s)")
found[("restriction", "heisenberg(1)")] = chat

# Compare with the frozen values.
tol = DEFAULTS["calibration"]["regression"]
frozen = {
    ("propagation", "heisenberg(1)"): GOLDENS["propagation"]["heisenberg(1)"]["c"],
    ("localization", "first", "n32_glued(1)"):
        GOLDENS["localization"]["first"]["n32_glued(1)"]["C"],
    ("localization", "second", "heisenberg_reiter(1,2)"):
        GOLDENS["localization"]["second"]["heisenberg_reiter(1,2)"]["C"],
    ("restriction", "heisenberg(1)"): GOLDENS["restriction"]["heisenberg(1)"]["cHat"],
}
bad = 0
print()
for k, v in found.items():
    ref = frozen[k]
    rel = abs(v - ref) / ref
    flag = "ok" if rel <= tol else "DRIFT"
    bad += flag != "ok"
    print(f"{'/'.join(k):<45} measured {v:<10.4g} frozen {ref:<10.4g} {flag}")
print(json.dumps({"/".join(k): v for k, v in found.items()}, indent=2))
sys.exit(1 if bad else 0)
