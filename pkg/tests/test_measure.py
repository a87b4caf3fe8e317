import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coagclt.measure import (
    Grid,
    GridFunction,
    GridMeasure,
    dual_norm_m1,
    dual_norm_sobolev,
    energy_function,
    moment,
    norms_report,
    pair,
    sobolev_gram,
    tail_at,
    tail_function,
    theta_fourier,
    theta_grid,
    weighted_norm,
)

G = Grid(1.0, 8)
weights = arrays(np.float64, 8, elements=st.floats(-10, 10, allow_subnormal=False))


def two_atoms(a=0.5, b=0.25):
    return GridMeasure.dirac(G, 1.0, a) + GridMeasure.dirac(G, 2.0, b)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(0.0, 4)
    with pytest.raises(ValueError):
        Grid(1.0, 1)
    assert np.all(np.diff(Grid(0.3, 10).masses) > 0)
    with pytest.raises(ValueError):
        G.index_of(1.5)
    with pytest.raises(ValueError):
        G.index_of(9.0)


def test_moment_examples():
    assert moment(GridMeasure.dirac(G, 1.0), 3) == 1.0
    nu = two_atoms()
    assert moment(nu, 1) == 1.0
    assert moment(nu, 0) == 0.75


def test_weighted_norm_examples():
    assert weighted_norm(two_atoms(0.5, -0.25), 1) == 1.75
    assert weighted_norm(GridMeasure.zeros(G), 2) == 0.0


@settings(max_examples=100, deadline=None)
@given(w=arrays(np.float64, 8, elements=st.floats(0, 10)), k=st.floats(0, 3))
def test_weighted_norm_positive_identity(w, k):
    nu = GridMeasure(G, w)
    assert weighted_norm(nu, k) == pytest.approx(moment(nu, 0) + moment(nu, k), rel=1e-12, abs=1e-12)


def test_tail_function_examples():
    nu = two_atoms()
    t = tail_function(nu)
    assert t.values[1] == 0.25  # cell (1, 2], e.g. x = 1.5
    assert tail_at(nu, 1.5) == 0.25
    d2 = tail_function(GridMeasure.dirac(G, 2.0)).values
    assert list(d2[:2]) == [1.0, 1.0] and np.all(d2[2:] == 0)
    assert tail_at(GridMeasure.dirac(G, 2.0), 2.0) == 1.0
    assert t.values[0] == moment(nu, 0)


def test_dual_norm_m1_dirac():
    assert dual_norm_m1(GridMeasure.dirac(G, 2.0), 1) == 4.0
    assert dual_norm_m1(GridMeasure.zeros(G), 1) == 0.0
    d = GridMeasure.dirac(G, 3.0)
    assert dual_norm_m1(d - d, 2) == 0.0


@pytest.mark.parametrize("delta", [1.0, 0.25, 0.1])
@pytest.mark.parametrize("k", [0.0, 0.5, 1.0, 2.0, 3.5])
def test_dual_norm_m1_closed_form(delta, k):
    g = Grid(delta, 40)
    for j in (1, 7, 40):
        x = g.masses[j - 1]
        assert dual_norm_m1(GridMeasure.dirac(g, x), k) == pytest.approx(x + x ** (k + 1) / (k + 1), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(a=weights, b=weights, s=st.floats(-5, 5))
def test_norms_triangle_and_homogeneity(a, b, s):
    u, v = GridMeasure(G, a), GridMeasure(G, b)
    for norm in (lambda m: dual_norm_m1(m, 1.0), lambda m: dual_norm_sobolev(m, 1.0)):
        nu, nv, nuv = norm(u), norm(v), norm(u + v)
        assert nuv <= nu + nv + 1e-12 * (1 + nu + nv)
        assert norm(u * s) == pytest.approx(abs(s) * nu, rel=1e-12, abs=1e-12)


def test_sobolev_basic():
    g = Grid(1.0, 20)
    assert dual_norm_sobolev(GridMeasure.zeros(g), 1.0) == 0.0
    nu = GridMeasure.dirac(g, 3.0) - GridMeasure.dirac(g, 7.0, 0.5)
    assert dual_norm_sobolev(nu * 2.0, 1.0) == pytest.approx(2 * dual_norm_sobolev(nu, 1.0), rel=1e-13)
    with pytest.raises(ValueError):
        dual_norm_sobolev(nu, 0.5)


def test_sobolev_dirac_growth_shape():
    g = Grid(1.0, 40)
    for k in (0.75, 1.0, 2.0):
        xs = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 40.0]
        r = [dual_norm_sobolev(GridMeasure.dirac(g, x), k) / (math.sqrt(x) * (1 + x**k)) for x in xs]
        # bounded ratio, no drift with x
        assert max(r) < 1.0 and min(r) > 0.25
        assert r[-1] <= 1.1 * max(r[:-1])


@pytest.mark.parametrize("x,y,k", [(2.0, 3.0, 1.0), (1.0, 1.0, 0.75), (4.0, 2.0, 2.0)])
def test_theta_against_fourier_oracle(x, y, k):
    th = theta_grid(Grid(1.0, 4), k)
    assert th[int(x) - 1, int(y) - 1] == pytest.approx(theta_fourier(x, y, k), rel=1e-8)


def test_theta_symmetric():
    th = theta_grid(Grid(0.5, 30), 1.5)
    assert np.allclose(th, th.T, rtol=1e-12, atol=0)


def test_sobolev_gram_matches_norm():
    g = Grid(0.5, 25)
    S = sobolev_gram(g, 1.0)
    w = np.random.default_rng(0).normal(size=25)
    assert math.sqrt(w @ S @ w) == pytest.approx(dual_norm_sobolev(GridMeasure(g, w), 1.0), rel=1e-12)


def test_pair_examples():
    d1 = GridMeasure.dirac(G, 1.0)
    assert pair(GridFunction.power(G, 0), d1) == 1.0
    nu = two_atoms()
    assert pair(energy_function(G), nu) == moment(nu, 1)
    assert pair(GridFunction(G, np.zeros(8)), nu) == 0.0
    with pytest.raises(ValueError):
        pair(GridFunction.power(Grid(1.0, 9), 1), nu)


@settings(max_examples=100, deadline=None)
@given(a=st.lists(st.integers(-50, 50), min_size=8, max_size=8),
       b=st.lists(st.integers(-50, 50), min_size=8, max_size=8),
       g=st.lists(st.integers(-50, 50), min_size=8, max_size=8),
       s=st.integers(-9, 9))
def test_pair_bilinear_exact(a, b, g, s):
    f = GridFunction(G, np.array(g, float))
    u, v = GridMeasure(G, np.array(a, float)), GridMeasure(G, np.array(b, float))
    assert pair(f, u + v) == pair(f, u) + pair(f, v)
    assert pair(f, u * s) == s * pair(f, u)
    f2 = GridFunction(G, np.array(a, float))
    assert pair(GridFunction(G, f.values + f2.values), v) == pair(f, v) + pair(f2, v)


def test_measure_csv_roundtrip(tmp_path):
    g = Grid(0.5, 6)
    nu = GridMeasure(g, [0.1, -0.2, 0, 0, 1.5, 0], tail=[0, 0.25, 0, 0, 0, 0])
    nu.to_csv(tmp_path / "nu.csv")
    back = GridMeasure.from_csv(tmp_path / "nu.csv", g)
    assert np.array_equal(back.ext, nu.ext)
    assert nu.overflow_mass == 0.25 * 4.0


def test_tail_clamp_for_tabulated_functions():
    f = GridFunction(G, np.arange(8.0))
    assert np.all(f.ext[8:] == 7.0)
    assert np.array_equal(energy_function(G).ext, G.ext_masses)


def test_norms_report_json():
    import json

    rep = json.loads(norms_report(two_atoms(), 1.0))
    assert rep["weighted"] == 1.75  # 2 * 0.5 + 3 * 0.25
    assert set(rep) == {"k", "weighted", "m1_dual", "sobolev_dual"}
