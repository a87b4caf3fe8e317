import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coagclt.kernel import KernelSpec, apply_cutoff, energy, eval_kernel, majorant

SPECS = [
    KernelSpec.constant_kernel(2.0),
    KernelSpec.additive(1.0),
    KernelSpec.product_sqrt(1.0),
    KernelSpec.smooth("constant", 1.5),
    KernelSpec.smooth("additive", 0.5),
    KernelSpec.smooth("saturating", 1.0),
]
grid_mass = st.integers(1, 400).map(lambda k: 0.25 * k)


def test_constant_value():
    assert eval_kernel(KernelSpec.constant_kernel(2.0), 1.0, 3.0) == 2.0


def test_additive_value():
    assert eval_kernel(KernelSpec.additive(1.0), 1.0, 2.0) == 3.0


def test_product_sqrt_value():
    assert eval_kernel(KernelSpec.product_sqrt(1.0), 4.0, 9.0) == 12.0


def test_majorant_values():
    assert majorant(KernelSpec.additive(1.0), 1.0, 2.0) == 4.0
    assert majorant(KernelSpec.additive(2.0), 0.5, 0.5) == 4.0


def test_product_sqrt_majorant_uses_three_halves():
    spec = KernelSpec.product_sqrt(2.0)
    assert spec.majorant_constant == 3.0
    # the ratio K / (C (1+x+y)) peaks at x = y = 1/4 with value 3/2
    assert eval_kernel(spec, 0.25, 0.25) == pytest.approx(majorant(spec, 0.25, 0.25))


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.family}-{s.smooth_name}")
def test_majorant_dominates_on_grid(spec):
    m = 0.05 * np.arange(1, 401)
    K = spec.matrix(m)
    M = majorant(spec, m[:, None], m[None, :])
    assert np.all(K >= 0)
    assert np.all(M - K >= -1e-12 * M)


@settings(max_examples=300, deadline=None)
@given(x=grid_mass, y=grid_mass, i=st.integers(0, len(SPECS) - 1))
def test_symmetry_exact(x, y, i):
    spec = SPECS[i]
    assert eval_kernel(spec, x, y) == eval_kernel(spec, y, x)


def test_symmetry_bulk():
    rng = np.random.default_rng(3)
    x = rng.integers(1, 500, 10_000) * 0.1
    y = rng.integers(1, 500, 10_000) * 0.1
    for spec in SPECS:
        assert np.array_equal(spec(x, y), spec(y, x))


def test_cutoff_examples():
    k5 = apply_cutoff(KernelSpec.additive(1.0), 5)
    assert eval_kernel(k5, 2.0, 3.0) == 5.0
    assert eval_kernel(k5, 4.0, 4.0) == 5.0
    k10 = apply_cutoff(KernelSpec.constant_kernel(1.0), 10)
    m = np.arange(1, 40, dtype=float)
    assert np.all(k10.matrix(m) == 1.0)


@settings(max_examples=200, deadline=None)
@given(x=grid_mass, y=grid_mass, n=st.floats(0.5, 60), i=st.integers(0, len(SPECS) - 1))
def test_cutoff_properties(x, y, n, i):
    spec = SPECS[i]
    kn = apply_cutoff(spec, n)
    k = eval_kernel(spec, x, y)
    v = eval_kernel(kn, x, y)
    assert v <= k
    if x + y <= n:
        assert v == k
    else:
        assert v <= spec.constant * n


def test_cutoff_converges_as_n_grows():
    spec = KernelSpec.additive(1.0)
    vals = [eval_kernel(apply_cutoff(spec, n), 7.0, 9.0) for n in (1, 4, 10, 15, 16, 100)]
    assert vals[-1] == vals[-2] == 16.0
    assert vals == sorted(vals)


@pytest.mark.parametrize("name", ["constant", "additive", "saturating"])
def test_smooth_builtins_monotone(name):
    spec = KernelSpec.smooth(name)
    m = 0.1 * np.arange(1, 300)
    K = spec.matrix(m)
    assert np.all(np.diff(K, axis=0) >= 0)
    assert np.all(np.diff(K, axis=1) >= 0)


def test_domain_errors():
    spec = KernelSpec.additive()
    with pytest.raises(ValueError):
        eval_kernel(spec, 0.0, 1.0)
    with pytest.raises(ValueError):
        majorant(spec, 1.0, -2.0)
    with pytest.raises(ValueError):
        apply_cutoff(spec, 0.0)
    with pytest.raises(ValueError):
        KernelSpec("gelling")
    with pytest.raises(ValueError):
        KernelSpec.additive(-1.0)


def test_dict_roundtrip_and_energy():
    spec = apply_cutoff(KernelSpec.smooth("saturating", 2.0), 12.0)
    assert KernelSpec.from_dict(spec.to_dict()) == spec
    assert energy(3.5) == 3.5
