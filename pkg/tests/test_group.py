import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stratlie import (
    Grid,
    GridFunction,
    GroupPoint,
    GroupSpecError,
    TwoStepGroup,
    ball_volume_mc,
    bracket,
    builtin_group,
    convolve,
    dilate,
    group_to_spec,
    homogeneous_norm,
    invert,
    multiply,
    parse_builtin,
    parse_group_spec,
)
from stratlie.group import rotation_planes, shared_center_reiter

from .conftest import BUILTIN_SPECS

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def points(g, n=3):
    return st.lists(
        st.tuples(arrays(float, g.d1, elements=finite), arrays(float, g.d2, elements=finite)),
        min_size=n, max_size=n,
    ).map(lambda ps: [GroupPoint(x, u) for x, u in ps])


def close(p, q, tol=1e-9):
    scale = 1 + max(np.abs(p.u).max(), np.abs(q.u).max(), np.abs(p.x).max())
    return np.allclose(p.x, q.x, atol=tol * scale) and np.allclose(p.u, q.u, atol=tol * scale)


@pytest.mark.parametrize("spec", BUILTIN_SPECS)
def test_builtin_dimensions(spec):
    g = builtin_group(*spec)
    assert g.Q == g.d1 + 2 * g.d2
    for Jk in g.J:
        assert np.array_equal(Jk, -Jk.T)


def test_builtin_dimension_formulas():
    assert builtin_group("heisenberg", 2).d1 == 4
    g = builtin_group("n32_glued", 3)
    assert (g.d1, g.d2) == (9, 3)
    g = builtin_group("heisenberg_reiter", 2, 3)
    assert (g.d1, g.d2, g.Q) == (8, 3, 2 * 3 + 2 + 6)


g_h1 = builtin_group("heisenberg", 1)
g_hr = builtin_group("heisenberg_reiter", 2, 2)


@given(points(g_h1))
def test_associativity_heisenberg(ps):
    a, b, c = ps
    assert close(multiply(g_h1, multiply(g_h1, a, b), c), multiply(g_h1, a, multiply(g_h1, b, c)))


@given(points(g_hr))
def test_associativity_and_inverse_reiter(ps):
    a, b, c = ps
    g = g_hr
    assert close(multiply(g, multiply(g, a, b), c), multiply(g, a, multiply(g, b, c)))
    e = multiply(g, a, invert(g, a))
    assert np.allclose(e.x, 0) and np.allclose(e.u, 0)


@given(points(g_hr, 2), st.floats(0.1, 5))
def test_dilation_is_automorphism(ps, R):
    a, b = ps
    lhs = dilate(multiply(g_hr, a, b), R)
    rhs = multiply(g_hr, dilate(a, R), dilate(b, R))
    assert close(lhs, rhs, 1e-8)
    assert homogeneous_norm(dilate(a, R)) == pytest.approx(R * homogeneous_norm(a), rel=1e-12)


@given(arrays(float, 6, elements=finite), arrays(float, 6, elements=finite))
def test_bracket_antisymmetric(x, y):
    assert np.allclose(bracket(g_hr, x, y), -bracket(g_hr, y, x))


def test_group_rejects_bad_matrices():
    with pytest.raises(GroupSpecError, match="skew"):
        TwoStepGroup(np.array([[[0, 1.0], [1.0, 0]]]))
    J = np.array([[0, 1.0], [-1.0, 0]])
    with pytest.raises(GroupSpecError, match="dependent"):
        TwoStepGroup(np.stack([J, 2 * J]))
    with pytest.raises(ValueError):
        dilate(GroupPoint(np.zeros(2), np.zeros(1)), 0.0)


def test_spec_roundtrip():
    g = builtin_group("heisenberg_reiter", 2, 2)
    h = parse_group_spec(group_to_spec(g))
    assert np.array_equal(h.J, g.J)
    assert h.name == g.name
    with pytest.raises(GroupSpecError):
        parse_group_spec("{not json")
    with pytest.raises(GroupSpecError):
        parse_group_spec(json.dumps({"d1": 2}))


def test_parse_builtin():
    assert parse_builtin("heisenberg_reiter:1,2").name == "heisenberg_reiter(1,2)"
    with pytest.raises(ValueError):
        parse_builtin("heisenberg:1,2")
    with pytest.raises(ValueError):
        parse_builtin("unknown:1")


def test_ball_volume_scales_with_homogeneous_dimension():
    g = builtin_group("heisenberg", 1)
    v1 = ball_volume_mc(g, 1.0, 200_000, seed=1)
    v2 = ball_volume_mc(g, 2.0, 200_000, seed=1)
    assert v2 / v1 == pytest.approx(2.0 ** g.Q, rel=0.03)


def rotation_generators(g, i, j):
    E = np.zeros((g.d1, g.d1))
    E[i, j], E[j, i] = -1.0, 1.0
    C = np.stack([Jk @ E - E @ Jk for Jk in g.J])
    S = np.linalg.lstsq(g.J.reshape(g.d2, -1).T, C.reshape(g.d2, -1).T, rcond=None)[0].T
    return E, S


@pytest.mark.parametrize("spec", [("heisenberg", 1), ("heisenberg", 2),
                                  ("heisenberg_reiter", 1, 2), ("n32_glued", 1)])
def test_rotation_planes_are_automorphisms(spec, rng):
    from scipy.linalg import expm

    g = builtin_group(*spec)
    planes = rotation_planes(g)
    assert planes
    for i, j in planes:
        E, S = rotation_generators(g, i, j)
        A, R = expm(0.7 * E), expm(0.7 * S)
        assert np.allclose(R @ R.T, np.eye(g.d2), atol=1e-12)
        x, y = rng.standard_normal((2, g.d1))
        assert np.allclose(bracket(g, A @ x, A @ y), R @ bracket(g, x, y), atol=1e-12)


def test_rotation_planes_absent_when_centers_are_shared():
    assert rotation_planes(builtin_group("heisenberg_reiter", 2, 3)) == []
    assert rotation_planes(shared_center_reiter()) == []


# ----------------------------------------------------------------------------
# grids and convolution


def small_grid(g, n=5, h=0.5):
    return Grid.symmetric(g.d1, g.d2, (n // 2) * h, n, (n // 2) * h, n)


def test_grid_points_and_measure():
    grid = Grid(((-1.0, 1.0, 3), (0.0, 2.0, 5)))
    pts = grid.points()
    assert pts.shape == (15, 2)
    assert np.allclose(pts[0], [-1, 0]) and np.allclose(pts[-1], [1, 2])
    assert grid.cell_measure == pytest.approx(1.0 * 0.5)
    gx, gu = grid.split(1)
    assert gx.shape == (3,) and gu.shape == (5,)


def test_gridfunction_norms_and_csv():
    g = builtin_group("heisenberg", 1)
    grid = small_grid(g, 3, 1.0)
    vals = np.zeros(grid.shape)
    vals[1, 1, 1] = 2.0
    f = GridFunction(g, grid, vals)
    assert f.l2_norm() == pytest.approx(2.0)
    assert f.lp_norm(1) == pytest.approx(2.0)
    assert f.lp_norm(np.inf) == 2.0
    text = f.to_csv()
    assert text.splitlines()[0] == "x1,x2,u1,re,im"
    assert len(text.splitlines()) == 1 + 27


def test_convolution_with_delta_reproduces_function(rng):
    g = builtin_group("heisenberg", 1)
    grid = small_grid(g, 7, 0.5)
    h = GridFunction(g, grid, rng.standard_normal(grid.shape))
    d = np.zeros(grid.shape)
    d[3, 3, 3] = 1.0 / grid.cell_measure
    out = convolve(g, GridFunction(g, grid, d), h)
    assert np.allclose(out.values, h.values, atol=1e-14)


def test_discrete_young_inequality(rng):
    g = builtin_group("heisenberg_reiter", 1, 2)
    grid = small_grid(g, 5, 0.5)
    for _ in range(5):
        f = np.zeros(grid.shape)
        f[1:4, 1:4, 1:4, 2, 2] = rng.random((3, 3, 3))
        F = GridFunction(g, grid, f)
        K = GridFunction(g, grid, rng.standard_normal(grid.shape))
        conv = convolve(g, F, K)
        assert conv.l2_norm() <= F.lp_norm(1) * K.l2_norm() * (1 + 1e-12)


def test_convolution_thread_independent(rng, monkeypatch):
    g = builtin_group("heisenberg", 1)
    grid = small_grid(g, 7, 0.5)
    f = GridFunction(g, grid, rng.standard_normal(grid.shape) * (rng.random(grid.shape) < 0.1))
    h = GridFunction(g, grid, rng.standard_normal(grid.shape))
    monkeypatch.setenv("STRATLIE_THREADS", "1")
    a = convolve(g, f, h, chunk=50).values
    monkeypatch.setenv("STRATLIE_THREADS", "3")
    b = convolve(g, f, h, chunk=50).values
    assert np.array_equal(a, b)
