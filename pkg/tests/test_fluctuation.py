import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coagclt.fluctuation import (
    char_fn,
    fluctuation_field,
    ou_covariance,
    ou_quadratic_expectation,
    ou_variance,
    pi_form,
)
from coagclt.kernel import KernelSpec
from coagclt.kinetic import solve_kinetic
from coagclt.measure import Grid, GridFunction, GridMeasure, energy_function, pair

G = Grid(1.0, 40)
CONST = KernelSpec.constant_kernel(1.0)


@pytest.fixture(scope="module")
def sol():
    return solve_kinetic(GridMeasure.dirac(G, 1.0), CONST, [0.25, 0.5, 1.0], 1e-3)


def test_fluctuation_field_examples():
    mu = GridMeasure.dirac(G, 1.0, 0.7) + GridMeasure.dirac(G, 3.0, 0.1)
    assert np.all(fluctuation_field(mu, mu, 0.01).ext == 0)
    z = GridMeasure.dirac(G, 2.0, 0.2)
    assert np.array_equal(fluctuation_field(z, mu, 1.0).ext, (z - mu).ext)
    a, b = GridMeasure.dirac(G, 4.0, 0.5), GridMeasure.dirac(G, 5.0, 0.25)
    lhs = fluctuation_field(a + b, mu, 0.25).ext
    rhs = fluctuation_field(a, mu, 0.25).ext + b.ext / 0.5
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        fluctuation_field(z, mu, 0.0)
    with pytest.raises(ValueError):
        fluctuation_field(GridMeasure.zeros(Grid(1.0, 5)), mu, 1.0)


def test_pi_examples():
    rng = np.random.default_rng(0)
    mu = GridMeasure(G, rng.random(40))
    psi = GridFunction(G, rng.normal(size=40))
    assert pi_form(mu, energy_function(G), psi, KernelSpec.additive()) == 0.0
    for a, c in ((1.0, 1.0), (0.3, 2.5)):
        ind = GridFunction.indicator(G, 2.0)
        assert pi_form(GridMeasure.dirac(G, 1.0, a), ind, ind, KernelSpec.constant_kernel(c)) == pytest.approx(
            0.25 * c * a * a, rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), fam=st.sampled_from(["constant", "additive", "product_sqrt"]))
def test_pi_symmetric_and_nonneg_diagonal(seed, fam):
    rng = np.random.default_rng(seed)
    g = Grid(0.5, 15)
    spec = {"constant": CONST, "additive": KernelSpec.additive(), "product_sqrt": KernelSpec.product_sqrt()}[fam]
    mu = GridMeasure(g, rng.random(15))
    f, h = GridFunction(g, rng.normal(size=15)), GridFunction(g, rng.normal(size=15))
    assert pi_form(mu, f, h, spec) == pytest.approx(pi_form(mu, h, f, spec), rel=1e-13, abs=1e-15)
    assert pi_form(mu, f, f, spec) >= 0


def test_ou_variance_trivial_cases(sol):
    assert ou_variance(energy_function(G), 1.0, CONST, sol) == 0.0
    assert ou_variance(GridFunction.indicator(G, 1.0), 0.0, CONST, sol) == 0.0


def test_ou_variance_self_convergence():
    phi = GridFunction.indicator(G, 1.0)
    vals = {}
    for dt in (4e-3, 2e-3, 1e-3, 5e-4, 2.5e-4):
        s = solve_kinetic(GridMeasure.dirac(G, 1.0), CONST, [0.5], dt)
        vals[dt] = ou_variance(phi, 0.5, CONST, s)
    rich = vals[2.5e-4] + (vals[2.5e-4] - vals[5e-4]) / 3
    assert abs(vals[1e-3] - rich) <= 1e-6
    d = [abs(vals[a] - vals[b]) for a, b in ((4e-3, 2e-3), (2e-3, 1e-3), (1e-3, 5e-4))]
    order = np.log2(np.array(d[:-1]) / np.array(d[1:]))
    assert np.all(order >= 1.9)


def test_covariance_reduces_to_variance(sol):
    phi = GridFunction.indicator(G, 2.0)
    cov = ou_covariance([0.5], [phi], GridMeasure.zeros(G), CONST, sol)
    assert cov.cov[0, 0] == ou_variance(phi, 0.5, CONST, sol)
    assert cov.mean[0] == 0.0


def test_covariance_of_energy_is_zero(sol):
    F0 = GridMeasure.dirac(G, 1.0, 0.5) - GridMeasure.dirac(G, 3.0, 0.2)
    E = energy_function(G)
    cov = ou_covariance([0.25, 0.5, 1.0], [E, E, E], F0, CONST, sol)
    assert np.all(cov.cov == 0)
    assert np.allclose(cov.mean, pair(E, F0), rtol=0, atol=1e-15)


def test_covariance_equal_times_cauchy_schwarz(sol):
    a, b = GridFunction.indicator(G, 1.0), GridFunction.power(G, 2)
    cov = ou_covariance([1.0, 1.0], [a, b], GridMeasure.zeros(G), CONST, sol)
    assert cov.cov[0, 1] ** 2 <= cov.cov[0, 0] * cov.cov[1, 1]
    assert np.array_equal(cov.cov, cov.cov.T)


def test_covariance_errors(sol):
    phi = GridFunction.indicator(G, 1.0)
    with pytest.raises(ValueError):
        ou_covariance([1.0, 0.5], [phi, phi], GridMeasure.zeros(G), CONST, sol)
    with pytest.raises(ValueError):
        ou_covariance([0.5], [phi, phi], GridMeasure.zeros(G), CONST, sol)


@pytest.mark.parametrize("seed", range(6))
def test_covariance_psd_battery(seed):
    rng = np.random.default_rng(seed)
    g = Grid(1.0, 25)
    spec = [CONST, KernelSpec.additive(0.5), KernelSpec.smooth("saturating")][seed % 3]
    times = np.sort(rng.choice([0.1, 0.2, 0.3, 0.5, 0.7], size=4))
    s = solve_kinetic(GridMeasure.dirac(g, 1.0), spec, np.unique(times), 1e-2)
    phis = [GridFunction(g, rng.normal(size=25)) for _ in times]
    cov = ou_covariance(times, phis, GridMeasure.zeros(g), spec, s)
    assert np.array_equal(cov.cov, cov.cov.T)
    assert cov.is_psd(1e-10)


def test_char_fn(sol):
    phis = [GridFunction.indicator(G, 1.0), GridFunction.indicator(G, 2.0)]
    F0 = GridMeasure.dirac(G, 1.0, 0.3)
    cov = ou_covariance([0.25, 0.5], phis, F0, CONST, sol)
    assert char_fn(cov, [0.0, 0.0]) == 1.0
    rng = np.random.default_rng(1)
    for p in rng.normal(scale=3, size=(50, 2)):
        assert abs(char_fn(cov, p)) <= 1.0
    d = np.array([0.7, -1.3])
    logs = [np.log(char_fn(cov, s * d)) for s in (1.0, 2.0, 3.0)]
    # second difference of a quadratic in s is constant: 2 * (-d^T Sigma d / 2)
    assert (logs[2] - 2 * logs[1] + logs[0]).real == pytest.approx(-(d @ cov.cov @ d), rel=1e-12)
    with pytest.raises(ValueError):
        char_fn(cov, [1.0])


def test_covariance_json(sol):
    cov = ou_covariance([0.5], [GridFunction.indicator(G, 1.0)], GridMeasure.zeros(G), CONST, sol)
    d = json.loads(cov.to_json())
    assert set(d) == {"times", "functions", "means", "covariance", "quadrature"}
    assert d["functions"] == ["1[x=1]"]


def test_quadratic_expectation_matches_direct_sum(sol):
    rng = np.random.default_rng(3)
    A = rng.normal(size=(40, 4))
    S = A @ A.T
    direct = 0.0
    # E w^T S w = sum over columns a of Var (a, F)
    for c in A.T:
        direct += ou_variance(GridFunction(G, c, np.zeros(40)), 0.5, CONST, sol)
    assert ou_quadratic_expectation(S, 0.5, CONST, sol) == pytest.approx(direct, rel=1e-10)
    with pytest.raises(ValueError):
        ou_quadratic_expectation(np.eye(3), 0.5, CONST, sol)
