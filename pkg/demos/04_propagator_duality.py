"""Forward variations and the backward propagator describe the same object.

pair(g, xi_t(x)) computed forward must equal (U^{0,t} g)(x) computed
backward.  Afterwards the perturbation series around the A-only flow is
summed term by term and compared with the full propagator.

    python demos/04_propagator_duality.py
"""
import numpy as np

from coagclt.kernel import KernelSpec
from coagclt.kinetic import solve_kinetic
from coagclt.measure import Grid, GridFunction, GridMeasure, pair
from coagclt.variation import propagator_series, solve_backward, solve_variation

grid = Grid(1.0, 60)
spec = KernelSpec.additive(1.0)
sol = solve_kinetic(GridMeasure.dirac(grid, 1.0), spec, [0.8, 1.0], dt=1e-3)

g = GridFunction.from_callable(grid, lambda x: np.sqrt(x) * np.exp(-x / 10))
U = solve_backward(g, 1.0, spec, sol).at(0.0)
print(f"{'x':>4} {'forward':>14} {'backward':>14} {'gap':>10}")
for x in (1.0, 2.0, 5.0, 10.0, 30.0):
    fwd = pair(g, solve_variation(x, spec, sol).at(1.0))
    bwd = U.values[grid.index_of(x)]
    print(f"{x:4.0f} {fwd:14.10f} {bwd:14.10f} {abs(fwd - bwd):10.2e}")

full = solve_backward(g, 1.0, spec, sol)
i = full.index(0.8)
print("\nseries truncation at horizon 0.2:")
for m in range(5):
    ser = propagator_series(g, 1.0, spec, sol, m)
    print(f"  terms={m}  sup gap {np.max(np.abs(ser.values[i] - full.values[i])):.3e}")
