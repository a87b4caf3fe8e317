"""Linearised kinetic flow: backward propagator, first and second variations.

The backward equation on test functions is g' = -Lambda_t g with

    (Lambda_t g)(z) = sum_x (g(x+z) - g(x) - g(z)) K(x,z) mu_t(x),

split as Lambda_t = A_t - B_t.  The forward variation xi_t solves the dual
equation, so (g, xi_t(x)) = (U^{0,t} g)(x).  All solvers step on the mesh of
the supplied :class:`KineticSolution` with classical RK4, taking mu_t at
half steps from its Hermite interpolant.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numba as nb
import numpy as np

from .kernel import KernelSpec
from .kinetic import KineticSolution, bilinear_rhs
from .measure import Grid, GridFunction, GridMeasure


@nb.njit(cache=True, nogil=True)
def _lambda(g, mu, K, nbins, out):
    out[:] = 0.0
    for z in range(nbins):
        gz = g[z]
        s = 0.0
        for x in range(nbins):
            mx = mu[x]
            if mx != 0.0:
                s += (g[x + z + 1] - g[x] - gz) * K[x, z] * mx
        out[z] = s


@nb.njit(cache=True, nogil=True)
def _a_op(g, mu, K, nbins, out):
    out[:] = 0.0
    for x in range(nbins):
        gx = g[x]
        s = 0.0
        for z in range(nbins):
            mz = mu[z]
            if mz != 0.0:
                s += (g[x + z + 1] - gx) * K[z, x] * mz
        out[x] = s


@nb.njit(cache=True, nogil=True)
def _b_op(g, mu, K, nbins, out):
    out[:] = 0.0
    for x in range(nbins):
        s = 0.0
        for z in range(nbins):
            s += g[z] * K[z, x] * mu[z]
        out[x] = s


def _kmat(spec: KernelSpec, kinetic: KineticSolution) -> np.ndarray:
    if spec == kinetic.spec and kinetic.kmat is not None:
        return kinetic.kmat
    return np.ascontiguousarray(spec.matrix(kinetic.grid.masses))


def apply_lambda(g: GridFunction, mu: GridMeasure, spec: KernelSpec) -> GridFunction:
    if g.grid != mu.grid:
        raise ValueError("grid mismatch")
    n = g.grid.nbins
    out = np.zeros(2 * n)
    _lambda(np.ascontiguousarray(g.ext), mu.ext, spec.matrix(g.grid.masses), n, out)
    return GridFunction.from_ext(g.grid, out)


def apply_a(g: GridFunction, mu: GridMeasure, spec: KernelSpec) -> GridFunction:
    n = g.grid.nbins
    out = np.zeros(2 * n)
    _a_op(np.ascontiguousarray(g.ext), mu.ext, spec.matrix(g.grid.masses), n, out)
    return GridFunction.from_ext(g.grid, out)


def apply_b(g: GridFunction, mu: GridMeasure, spec: KernelSpec) -> GridFunction:
    n = g.grid.nbins
    out = np.zeros(2 * n)
    _b_op(np.ascontiguousarray(g.ext), mu.ext, spec.matrix(g.grid.masses), n, out)
    return GridFunction.from_ext(g.grid, out)


# ------------------------------------------------------------ containers


def _write_field_csv(path, mesh, grid: Grid, values, meta: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "mass", "value"])
        for t, row in zip(mesh, values):
            for m, v in zip(grid.ext_masses, row):
                w.writerow([repr(float(t)), repr(float(m)), repr(float(v))])
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2)


@dataclass
class PropagatorField:
    """g_t = U^{t,r} g_r on the kinetic mesh points t <= r."""

    grid: Grid
    mesh: np.ndarray
    r: float
    values: np.ndarray  # (len(mesh), 2N)
    kinetic: KineticSolution
    derivs: np.ndarray = None  # d g_t / dt at the mesh points

    def index(self, t: float) -> int:
        i = int(np.searchsorted(self.mesh, t - 1e-12))
        if i >= self.mesh.size or abs(self.mesh[i] - t) > 1e-9:
            raise ValueError(f"time {t} is not on the propagator mesh")
        return i

    def at(self, t: float) -> GridFunction:
        return GridFunction.from_ext(self.grid, self.values[self.index(t)])

    def to_csv(self, path) -> None:
        _write_field_csv(path, self.mesh, self.grid, self.values,
                         {"kind": "propagator", "r": self.r, "dt": self.kinetic.dt,
                          "N": self.grid.nbins})


@dataclass
class VariationField:
    """xi_t(x; .) on the kinetic mesh."""

    grid: Grid
    source: float
    mesh: np.ndarray
    states: np.ndarray

    def at(self, t: float) -> GridMeasure:
        i = int(np.argmin(np.abs(self.mesh - t)))
        if abs(self.mesh[i] - t) > 1e-9:
            raise ValueError(f"time {t} is not on the mesh")
        return GridMeasure.from_ext(self.grid, self.states[i])

    def to_csv(self, path) -> None:
        _write_field_csv(path, self.mesh, self.grid, self.states,
                         {"kind": "first_variation", "source": self.source,
                          "N": self.grid.nbins})


@dataclass
class SecondVariationField:
    """eta_t(x, w; .) on the kinetic mesh."""

    grid: Grid
    sources: tuple
    mesh: np.ndarray
    states: np.ndarray
    method: str = "direct"

    def at(self, t: float) -> GridMeasure:
        i = int(np.argmin(np.abs(self.mesh - t)))
        if abs(self.mesh[i] - t) > 1e-9:
            raise ValueError(f"time {t} is not on the mesh")
        return GridMeasure.from_ext(self.grid, self.states[i])

    def to_csv(self, path) -> None:
        _write_field_csv(path, self.mesh, self.grid, self.states,
                         {"kind": "second_variation", "sources": list(self.sources),
                          "method": self.method, "N": self.grid.nbins})


# ------------------------------------------------------------ backward flows


def _backward(kinetic, K, ir, g_r, op, source=None):
    """RK4 for g' = -op_t g + source_t backwards from mesh index ir to 0.

    ``op(g, mu, out)`` writes op_t g.  ``source`` is an optional pair
    (values on mesh, values at midpoints).  Returns values and time
    derivatives at mesh points 0..ir.
    """
    n2 = g_r.size
    vals = np.empty((ir + 1, n2))
    ders = np.empty((ir + 1, n2))
    st, mid, mesh = kinetic.states, kinetic.midpoints, kinetic.mesh
    k1, k2, k3, k4 = (np.zeros(n2) for _ in range(4))
    src_m, src_mid = source if source is not None else (None, None)

    def f(g, mu, src, out):
        # dg/dtau with tau = r - t
        op(g, mu, out)
        if src is not None:
            out -= src

    g = g_r.copy()
    vals[ir] = g
    f(g, st[ir], None if src_m is None else src_m[ir], k1)
    ders[ir] = -k1
    for s in range(ir - 1, -1, -1):
        h = mesh[s + 1] - mesh[s]
        sm = None if src_mid is None else src_mid[s]
        f(g + 0.5 * h * k1, mid[s], sm, k2)
        f(g + 0.5 * h * k2, mid[s], sm, k3)
        f(g + h * k3, st[s], None if src_m is None else src_m[s], k4)
        g = g + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        vals[s] = g
        f(g, st[s], None if src_m is None else src_m[s], k1)
        ders[s] = -k1
    return vals, ders


def solve_backward(g_r: GridFunction, r: float, spec: KernelSpec,
                   kinetic: KineticSolution) -> PropagatorField:
    """U^{t,r} g_r for every kinetic mesh point t <= r."""
    ir = kinetic.index(r)
    K = _kmat(spec, kinetic)
    n = kinetic.grid.nbins
    op = lambda g, mu, out: _lambda(g, mu, K, n, out)
    vals, ders = _backward(kinetic, K, ir, np.ascontiguousarray(g_r.ext), op)
    return PropagatorField(kinetic.grid, kinetic.mesh[: ir + 1], float(kinetic.mesh[ir]), vals,
                           kinetic, ders)


def _interp_mid(vals, ders, mesh):
    h = (mesh[1:] - mesh[:-1])[:, None]
    return 0.5 * (vals[:-1] + vals[1:]) + h / 8.0 * (ders[:-1] - ders[1:])


def propagator_series(g_r: GridFunction, r: float, spec: KernelSpec, kinetic: KineticSolution,
                      terms: int, zero_b: bool = False) -> PropagatorField:
    """Truncated perturbation series of U^{t,r} around the A_t-only flow S.

    Term j is w_j(t) = -int_t^r S^{t,s} B_s w_{j-1}(s) ds, evaluated as the
    solution of w_j' = -A_t w_j + B_t w_{j-1}, w_j(r) = 0.
    """
    if terms < 0:
        raise ValueError("number of terms must be non-negative")
    ir = kinetic.index(r)
    K = _kmat(spec, kinetic)
    n = kinetic.grid.nbins
    mesh = kinetic.mesh[: ir + 1]
    a_op = lambda g, mu, out: _a_op(g, mu, K, n, out)
    vals, ders = _backward(kinetic, K, ir, np.ascontiguousarray(g_r.ext), a_op)
    total = vals.copy()
    if not zero_b:
        st, mid = kinetic.states, kinetic.midpoints
        prev_v, prev_d = vals, ders
        for _ in range(terms):
            prev_mid = _interp_mid(prev_v, prev_d, mesh)
            src_m = np.empty_like(prev_v)
            src_mid = np.empty_like(prev_mid)
            for s in range(ir + 1):
                _b_op(prev_v[s], st[s], K, n, src_m[s])
            for s in range(ir):
                _b_op(prev_mid[s], mid[s], K, n, src_mid[s])
            prev_v, prev_d = _backward(kinetic, K, ir, np.zeros(2 * n), a_op, (src_m, src_mid))
            total += prev_v
    return PropagatorField(kinetic.grid, mesh, float(mesh[-1]), total, kinetic)


# ------------------------------------------------------------ forward flows


def _linear_op(K, n):
    def op(xi, mu, out):
        out[:] = 0.0
        bilinear_rhs(xi, mu, K, n, 1.0, out)
    return op


def _source(a, b, K, n, out):
    # symmetrised so that swapping the sources is exact in floating point
    ab = np.zeros_like(out)
    ba = np.zeros_like(out)
    bilinear_rhs(a, b, K, n, 0.5, ab)
    bilinear_rhs(b, a, K, n, 0.5, ba)
    out[:] = ab + ba


def _forward_xi(kinetic, K, xi0, upto=None):
    n = kinetic.grid.nbins
    op = _linear_op(K, n)
    mesh, st, mid = kinetic.mesh, kinetic.states, kinetic.midpoints
    last = mesh.size - 1 if upto is None else upto
    out = np.empty((last + 1, xi0.size))
    xi = xi0.copy()
    out[0] = xi
    k1, k2, k3, k4 = (np.zeros(xi0.size) for _ in range(4))
    for s in range(last):
        h = mesh[s + 1] - mesh[s]
        op(xi, st[s], k1)
        op(xi + 0.5 * h * k1, mid[s], k2)
        op(xi + 0.5 * h * k2, mid[s], k3)
        op(xi + h * k3, st[s + 1], k4)
        xi = xi + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[s + 1] = xi
    return out


def solve_variation(x: float, spec: KernelSpec, kinetic: KineticSolution) -> VariationField:
    """xi_t(x; .) = derivative of mu_t along delta_x, started from xi_0 = delta_x."""
    grid = kinetic.grid
    i = grid.index_of(x)
    xi0 = np.zeros(2 * grid.nbins)
    xi0[i] = 1.0
    states = _forward_xi(kinetic, _kmat(spec, kinetic), xi0)
    return VariationField(grid, float(x), kinetic.mesh.copy(), states)


def solve_second_variation(x: float, w: float, spec: KernelSpec, kinetic: KineticSolution,
                           method: str = "direct") -> SecondVariationField:
    """eta_t(x, w; .), second derivative of mu_t along delta_x and delta_w.

    ``method="direct"`` integrates the linear equation with source
    Omega_s = B(xi_s(x), xi_s(w)) in one RK4 sweep; ``"duhamel"`` evaluates
    eta_t = int_0^t V^{t,s} Omega_s ds with the trapezoid rule in s
    (quadratic in the number of mesh points, meant as a cross-check).
    """
    grid = kinetic.grid
    n = grid.nbins
    K = _kmat(spec, kinetic)
    n2 = 2 * n
    ix, iw = grid.index_of(x), grid.index_of(w)
    mesh, st, mid = kinetic.mesh, kinetic.states, kinetic.midpoints
    ex = np.zeros(n2)
    ex[ix] = 1.0
    ew = np.zeros(n2)
    ew[iw] = 1.0
    op = _linear_op(K, n)

    if method == "direct":
        y = np.zeros(3 * n2)  # (xi_x, xi_w, eta)
        y[:n2] = ex
        y[n2 : 2 * n2] = ew
        out = np.empty((mesh.size, n2))
        out[0] = 0.0
        tmp = np.zeros(n2)

        def f(y, mu, dy):
            a, b, e = y[:n2], y[n2 : 2 * n2], y[2 * n2 :]
            op(a, mu, dy[:n2])
            op(b, mu, dy[n2 : 2 * n2])
            op(e, mu, dy[2 * n2 :])
            _source(a, b, K, n, tmp)
            dy[2 * n2 :] += tmp

        k1, k2, k3, k4 = (np.zeros(3 * n2) for _ in range(4))
        for s in range(mesh.size - 1):
            h = mesh[s + 1] - mesh[s]
            f(y, st[s], k1)
            f(y + 0.5 * h * k1, mid[s], k2)
            f(y + 0.5 * h * k2, mid[s], k3)
            f(y + h * k3, st[s + 1], k4)
            y = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            out[s + 1] = y[2 * n2 :]
        return SecondVariationField(grid, (float(x), float(w)), mesh.copy(), out, method)

    if method != "duhamel":
        raise ValueError(f"unknown method {method!r}")
    xs = _forward_xi(kinetic, K, ex)
    ws = _forward_xi(kinetic, K, ew)
    m = mesh.size
    hs = np.diff(mesh)
    eta = np.zeros((m, n2))
    omega = np.zeros(n2)
    k1, k2, k3, k4 = (np.zeros(n2) for _ in range(4))
    for j in range(m):
        _source(xs[j], ws[j], K, n, omega)
        v = omega.copy()
        for t in range(j, m):
            wgt = 0.5 * ((hs[j - 1] if j > 0 else 0.0) + (hs[j] if j < t else 0.0))
            eta[t] += wgt * v
            if t + 1 < m:
                h = hs[t]
                op(v, st[t], k1)
                op(v + 0.5 * h * k1, mid[t], k2)
                op(v + 0.5 * h * k2, mid[t], k3)
                op(v + h * k3, st[t + 1], k4)
                v = v + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return SecondVariationField(grid, (float(x), float(w)), mesh.copy(), eta, method)
