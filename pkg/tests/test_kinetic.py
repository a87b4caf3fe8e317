import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coagclt.kernel import KernelSpec, apply_cutoff
from coagclt.kinetic import (
    KineticInstabilityError,
    build_mesh,
    coagulation_rhs,
    conservation_residual,
    constant_kernel_exact,
    lipschitz_probe,
    solve_kinetic,
)
from coagclt.measure import Grid, GridMeasure, moment, weighted_norm
from coagclt.variation import solve_variation

KERNELS = [
    KernelSpec.constant_kernel(1.0),
    KernelSpec.additive(1.0),
    KernelSpec.product_sqrt(1.0),
    KernelSpec.smooth("saturating", 1.0),
    apply_cutoff(KernelSpec.additive(1.0), 20.0),
]


def test_rhs_monodisperse_example():
    g = Grid(1.0, 10)
    r = coagulation_rhs(GridMeasure.dirac(g, 1.0), KernelSpec.constant_kernel(1.0))
    assert r.weights[0] == -1.0 and r.weights[1] == 0.5
    assert np.all(r.weights[2:] == 0)


def test_rhs_zero_measure():
    g = Grid(1.0, 10)
    assert np.all(coagulation_rhs(GridMeasure.zeros(g), KernelSpec.additive()).ext == 0)


@settings(max_examples=60, deadline=None)
@given(w=st.lists(st.integers(0, 20), min_size=12, max_size=12), i=st.integers(0, len(KERNELS) - 1))
def test_rhs_mass_balance(w, i):
    g = Grid(0.5, 12)
    mu = GridMeasure(g, np.array(w, float) / 8)
    r = coagulation_rhs(mu, KERNELS[i])
    flux = r.ext @ g.ext_masses
    scale = 1 + moment(mu, 1) ** 2 * 100
    assert abs(flux) <= 1e-13 * scale


def test_closed_form_constant_kernel():
    g = Grid(1.0, 200)
    mu0 = GridMeasure.dirac(g, 1.0)
    exact = constant_kernel_exact(g, 1.0)
    s1 = solve_kinetic(mu0, KernelSpec.constant_kernel(), [1.0], 1e-3).at(1.0).weights
    s2 = solve_kinetic(mu0, KernelSpec.constant_kernel(), [1.0], 5e-4).at(1.0).weights
    # Richardson estimate built only from the solver; it must agree with the closed form
    rich = s2 + (s2 - s1) / 15
    assert np.max(np.abs(rich - exact)) <= 1e-10
    assert np.max(np.abs(s1 - exact)) <= 1e-6


def test_constant_kernel_order_four():
    g = Grid(1.0, 200)
    c = 10.0  # large enough that the error is above roundoff, small enough that truncation is invisible
    exact = constant_kernel_exact(g, 1.0, c)
    dts = np.array([4e-3, 2e-3, 1e-3, 5e-4])
    errs = [np.max(np.abs(solve_kinetic(GridMeasure.dirac(g, 1.0), KernelSpec.constant_kernel(c),
                                        [1.0], dt).at(1.0).weights - exact)) for dt in dts]
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert abs(slope - 4) <= 0.3


@pytest.mark.parametrize("spec", KERNELS, ids=lambda s: f"{s.family}-{s.smooth_name}-{s.cutoff}")
def test_conservation_over_two_units(spec):
    g = Grid(1.0, 150)
    mu0 = GridMeasure.dirac(g, 1.0, 0.7) + GridMeasure.dirac(g, 3.0, 0.1)
    sol = solve_kinetic(mu0, spec, [0.5, 1.0, 2.0], 1e-3)
    assert conservation_residual(sol) <= 1e-8
    assert np.all(sol.states >= 0)
    assert np.array_equal(sol.states[0], mu0.ext)
    assert sol.clipped <= 1e-10 * 2.0


def test_additive_zeroth_moment_decay():
    g = Grid(1.0, 200)
    mu0 = GridMeasure.dirac(g, 1.0)
    times = [0.25, 0.5, 1.0]
    sol = solve_kinetic(mu0, KernelSpec.additive(1.0), times, 1e-3)
    fine = solve_kinetic(mu0, KernelSpec.additive(1.0), times, 2.5e-4)
    for t in times:
        m0 = moment(sol.at(t), 0)
        assert m0 == pytest.approx(moment(fine.at(t), 0), abs=1e-12)
        # until t = 1 the mass beyond bin 200 is ~1e-9, so the tail is invisible in M0
        assert m0 == pytest.approx(math.exp(-t), abs=1e-10)


def test_zero_initial_measure_residual():
    g = Grid(1.0, 20)
    sol = solve_kinetic(GridMeasure.zeros(g), KernelSpec.additive(), [1.0], 0.1)
    assert conservation_residual(sol) == 0.0


def test_coarse_step_is_never_silent():
    g = Grid(1.0, 200)
    mu0 = GridMeasure.dirac(g, 1.0)
    sol = solve_kinetic(mu0, KernelSpec.constant_kernel(), [2.0], 0.5)
    meta = sol.metadata()
    assert "conservation_residual" in meta and "clipped_weight" in meta
    with pytest.raises(KineticInstabilityError, match="reduce dt"):
        solve_kinetic(mu0, KernelSpec.additive(), [2.0], 0.5)


def test_negative_initial_measure_rejected():
    g = Grid(1.0, 5)
    with pytest.raises(ValueError):
        solve_kinetic(GridMeasure(g, [1, -1, 0, 0, 0]), KernelSpec.additive(), [1.0], 0.1)


def test_mesh_hits_requested_times():
    m = build_mesh([0.3, 1.0], 0.25)
    assert m[0] == 0.0 and 0.3 in m and m[-1] == 1.0
    assert np.max(np.diff(m)) <= 0.25 + 1e-15


def test_dense_output_between_mesh_points():
    g = Grid(1.0, 60)
    mu0 = GridMeasure.dirac(g, 1.0)
    sol = solve_kinetic(mu0, KernelSpec.constant_kernel(), [1.0], 1e-2)
    assert np.max(np.abs(sol.at(0.555).weights - constant_kernel_exact(g, 0.555))) < 1e-8
    with pytest.raises(ValueError):
        sol.at(1.5)


def test_moment_growth_is_bounded():
    g = Grid(1.0, 300)
    sol = solve_kinetic(GridMeasure.dirac(g, 1.0), KernelSpec.additive(), [1.5], 1e-3)
    m2 = sol.moments(2)
    # M2 obeys M2' <= 2 M1 M2 with M1 = 1, so an e^{2t} envelope must hold
    assert np.all(m2 <= m2[0] * np.exp(2 * sol.mesh) * (1 + 1e-9))
    assert np.all(np.isfinite(m2))


def test_tracked_functionals_follow_states():
    g = Grid(1.0, 80)
    from coagclt.measure import GridFunction

    phi = GridFunction.power(g, 0)
    sol = solve_kinetic(GridMeasure.dirac(g, 1.0), KernelSpec.additive(), [1.0], 1e-3, track={"n": phi})
    assert np.allclose(sol.tracked["n"], sol.states @ phi.ext, rtol=0, atol=1e-13)


def test_lipschitz_probe_identity_and_bounded():
    g = Grid(1.0, 100)
    spec = KernelSpec.constant_kernel()
    mu0 = GridMeasure.dirac(g, 1.0)
    assert lipschitz_probe(mu0, mu0, spec, 1.0) == 0.0
    ratios = [lipschitz_probe(mu0 + GridMeasure.dirac(g, 2.0, s), mu0, spec, 1.0) for s in (0.04, 0.02, 0.01)]
    assert all(np.isfinite(ratios))
    assert abs(ratios[1] - ratios[2]) < 0.6 * abs(ratios[0] - ratios[1])


def test_lipschitz_probe_limit_is_first_variation():
    g = Grid(1.0, 100)
    spec = KernelSpec.constant_kernel()
    mu0 = GridMeasure.dirac(g, 1.0)
    sol = solve_kinetic(mu0, spec, [1.0], 1e-3)
    xi = solve_variation(2.0, spec, sol).at(1.0)
    target = weighted_norm(xi, 1) / weighted_norm(GridMeasure.dirac(g, 2.0), 1)
    for norm in ("weighted",):
        r = lipschitz_probe(mu0 + GridMeasure.dirac(g, 2.0, 1e-4), mu0, spec, 1.0, norm=norm)
        assert r == pytest.approx(target, rel=1e-3)
    for norm in ("m1", "sobolev"):
        assert np.isfinite(lipschitz_probe(mu0 + GridMeasure.dirac(g, 2.0, 1e-3), mu0, spec, 1.0, norm=norm))
    with pytest.raises(ValueError):
        lipschitz_probe(mu0 + GridMeasure.dirac(g, 2.0, 1e-3), mu0, spec, 1.0, norm="sup")


def test_solution_csv_and_metadata(tmp_path):
    g = Grid(1.0, 10)
    sol = solve_kinetic(GridMeasure.dirac(g, 1.0), KernelSpec.additive(), [0.5, 1.0], 1e-2)
    sol.to_csv(tmp_path / "s.csv")
    sol.write_metadata(tmp_path / "m.json")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "time,mass,weight"
    assert {r.split(",")[0] for r in rows[1:]} == {"0.5", "1.0"}
    meta = json.loads((tmp_path / "m.json").read_text())
    assert meta["N"] == 10 and meta["dt"] == 1e-2 and meta["kernel"]["family"] == "additive"
    assert meta["conservation_residual"] < 1e-12
