"""Signed measures and test functions on a uniform mass grid.

Bin ``k = 1..N`` carries the atom at mass ``k * delta``.  Every measure and
function additionally owns ``N`` inert overflow bins at masses
``(N+1..2N) * delta``: merged particles heavier than the last active bin land
there and never coagulate again.  Coagulation of two active bins always
lands inside the overflow range, so no mass ever leaves the extended grid.
"""
from __future__ import annotations

import csv
import functools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate


@dataclass(frozen=True)
class Grid:
    delta: float
    nbins: int

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("grid spacing must be positive")
        if self.nbins < 2:
            raise ValueError("grid needs at least two bins")

    @property
    def masses(self) -> np.ndarray:
        return self.delta * np.arange(1, self.nbins + 1, dtype=float)

    @property
    def tail_masses(self) -> np.ndarray:
        return self.delta * np.arange(self.nbins + 1, 2 * self.nbins + 1, dtype=float)

    @property
    def ext_masses(self) -> np.ndarray:
        return self.delta * np.arange(1, 2 * self.nbins + 1, dtype=float)

    def index_of(self, mass: float) -> int:
        """0-based active index of an on-grid mass."""
        k = mass / self.delta
        i = int(round(k))
        if i < 1 or i > self.nbins or abs(k - i) > 1e-9 * max(1.0, k):
            raise ValueError(f"mass {mass} is not an active grid point")
        return i - 1


@dataclass
class GridMeasure:
    grid: Grid
    weights: np.ndarray
    tail: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.grid.nbins
        self.weights = np.asarray(self.weights, dtype=float).reshape(n)
        if self.tail is None:
            self.tail = np.zeros(n)
        else:
            self.tail = np.asarray(self.tail, dtype=float).reshape(n)

    @classmethod
    def zeros(cls, grid: Grid) -> "GridMeasure":
        return cls(grid, np.zeros(grid.nbins))

    @classmethod
    def dirac(cls, grid: Grid, mass: float, weight: float = 1.0) -> "GridMeasure":
        w = np.zeros(grid.nbins)
        w[grid.index_of(mass)] = weight
        return cls(grid, w)

    @classmethod
    def from_ext(cls, grid: Grid, ext) -> "GridMeasure":
        ext = np.asarray(ext, dtype=float)
        return cls(grid, ext[: grid.nbins].copy(), ext[grid.nbins :].copy())

    @property
    def ext(self) -> np.ndarray:
        return np.concatenate([self.weights, self.tail])

    @property
    def overflow_mass(self) -> float:
        return float(self.tail @ self.grid.tail_masses)

    def copy(self) -> "GridMeasure":
        return GridMeasure(self.grid, self.weights.copy(), self.tail.copy())

    def _check(self, other):
        if other.grid != self.grid:
            raise ValueError("grid mismatch")

    def __add__(self, other):
        self._check(other)
        return GridMeasure(self.grid, self.weights + other.weights, self.tail + other.tail)

    def __sub__(self, other):
        self._check(other)
        return GridMeasure(self.grid, self.weights - other.weights, self.tail - other.tail)

    def __mul__(self, s):
        return GridMeasure(self.grid, self.weights * s, self.tail * s)

    __rmul__ = __mul__

    def __truediv__(self, s):
        return GridMeasure(self.grid, self.weights / s, self.tail / s)

    def __neg__(self):
        return self * -1.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mass", "weight"])
            for m, v in zip(self.grid.masses, self.weights):
                w.writerow([repr(float(m)), repr(float(v))])
            for m, v in zip(self.grid.tail_masses, self.tail):
                if v != 0.0:
                    w.writerow([repr(float(m)), repr(float(v))])

    @classmethod
    def from_csv(cls, path, grid: Grid) -> "GridMeasure":
        ext = np.zeros(2 * grid.nbins)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                k = float(row["mass"]) / grid.delta
                i = int(round(k))
                if i < 1 or i > 2 * grid.nbins or abs(k - i) > 1e-9 * k:
                    raise ValueError(f"mass {row['mass']} is off the grid")
                ext[i - 1] += float(row["weight"])
        return cls.from_ext(grid, ext)


@dataclass
class GridFunction:
    """A function sampled at the active masses, plus its overflow values.

    When ``tail`` is None the overflow values are clamped to the last active
    value, the only sensible extension of a purely tabulated function.
    """

    grid: Grid
    values: np.ndarray
    tail: Optional[np.ndarray] = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        n = self.grid.nbins
        self.values = np.asarray(self.values, dtype=float).reshape(n)
        if self.tail is not None:
            self.tail = np.asarray(self.tail, dtype=float).reshape(n)

    @classmethod
    def from_callable(cls, grid: Grid, f: Callable, name: str = "") -> "GridFunction":
        ext = np.asarray(f(grid.ext_masses), dtype=float) * np.ones(2 * grid.nbins)
        return cls(grid, ext[: grid.nbins], ext[grid.nbins :], name=name)

    @classmethod
    def from_ext(cls, grid: Grid, ext, name: str = "") -> "GridFunction":
        ext = np.asarray(ext, dtype=float)
        return cls(grid, ext[: grid.nbins].copy(), ext[grid.nbins :].copy(), name=name)

    @classmethod
    def power(cls, grid: Grid, p: float) -> "GridFunction":
        return cls.from_callable(grid, lambda x: x**p, name=f"x^{p:g}")

    @classmethod
    def indicator(cls, grid: Grid, mass: float) -> "GridFunction":
        v = np.zeros(2 * grid.nbins)
        v[grid.index_of(mass)] = 1.0
        return cls.from_ext(grid, v, name=f"1[x={mass:g}]")

    @property
    def ext(self) -> np.ndarray:
        tail = self.tail if self.tail is not None else np.full(self.grid.nbins, self.values[-1])
        return np.concatenate([self.values, tail])


def energy_function(grid: Grid) -> GridFunction:
    """E(x) = x as a grid function (exact in every overflow bin)."""
    return GridFunction.from_callable(grid, lambda x: x, name="E")


# ---------------------------------------------------------------- moments


def moment(nu: GridMeasure, k: float) -> float:
    return float(np.sum(nu.grid.masses**k * nu.weights))


def weighted_norm(nu: GridMeasure, k: float) -> float:
    """The norm of nu in M_{1+E^k}: sum of (1 + x^k) |w|."""
    return float(np.sum((1.0 + nu.grid.masses**k) * np.abs(nu.weights)))


def pair(g: GridFunction, nu: GridMeasure) -> float:
    if g.grid != nu.grid:
        raise ValueError("grid mismatch")
    return float(g.ext @ nu.ext)


def tail_function(nu: GridMeasure) -> GridFunction:
    """Right tail of nu; entry m is its value on ((m-1) delta, m delta]."""
    t = np.cumsum(nu.weights[::-1])[::-1]
    return GridFunction(nu.grid, t, np.zeros(nu.grid.nbins), name="tail")


def tail_at(nu: GridMeasure, x: float) -> float:
    """nu([x, inf)) over the active bins (closed tail: the atom at x counts)."""
    m = nu.grid.masses
    return float(np.sum(nu.weights[m >= x - 1e-12 * max(1.0, x)]))


def dual_norm_m1(nu: GridMeasure, k: float) -> float:
    """Dual norm of M^1_{1+E^k}: integral of |tail| (1 + y^k) dy, exactly."""
    d = nu.grid.delta
    edges = d * np.arange(nu.grid.nbins + 1, dtype=float)
    cell = d + (edges[1:] ** (k + 1) - edges[:-1] ** (k + 1)) / (k + 1)
    return float(np.sum(np.abs(tail_function(nu).values) * cell))


# ------------------------------------------------------ Sobolev dual norm


@functools.lru_cache(maxsize=32)
def _sobolev_cells(delta: float, nbins: int, k: float) -> np.ndarray:
    """C[p, q] = integral over cell p x cell q of f(z) f(w) exp(-|z - w|).

    f = 1 + z^k and cell p = [p delta, (p+1) delta].  Off-diagonal blocks
    factorise because exp(-|z-w|) = exp(z - w) when z < w.
    """
    f = lambda z: 1.0 + z**k
    A = np.empty(nbins)
    B = np.empty(nbins)
    D = np.empty(nbins)
    for p in range(nbins):
        a, b = p * delta, (p + 1) * delta
        A[p] = integrate.quad(lambda z: f(z) * math.exp(z - b), a, b, epsabs=0, epsrel=1e-13)[0]
        B[p] = integrate.quad(lambda w: f(w) * math.exp(a - w), a, b, epsabs=0, epsrel=1e-13)[0]

        def inner(z, a=a):
            return integrate.quad(lambda w: f(w) * math.exp(w - z), a, z, epsabs=0, epsrel=1e-12)[0]

        D[p] = 2.0 * integrate.quad(lambda z: f(z) * inner(z), a, b, epsabs=0, epsrel=1e-12)[0]
    gap = np.subtract.outer(np.arange(nbins), np.arange(nbins))  # q - p
    with np.errstate(over="ignore"):
        C = np.outer(A, B) * np.exp(-(np.abs(gap).T - 1) * delta)
    C = np.triu(C, 1)
    C = C + C.T
    C[np.diag_indices(nbins)] = D
    return C


def theta_grid(grid: Grid, k: float) -> np.ndarray:
    """theta_k(x_i, x_j) on all active grid pairs.

    Uses theta_k(x, y) = pi * int_0^x int_0^y f(z) f(w) exp(-|z-w|) dz dw,
    which follows from int exp(ip(w-z)) / (1+p^2) dp = pi exp(-|w-z|).
    """
    C = _sobolev_cells(grid.delta, grid.nbins, float(k))
    return math.pi * np.cumsum(np.cumsum(C, axis=0), axis=1)


def theta_fourier(x: float, y: float, k: float, pmax: float = 2000.0) -> float:
    """theta_k(x, y) straight from its oscillatory p-integral (reference path)."""

    def transform(a, p):
        re = integrate.quad(lambda z: 1.0 + z**k, 0.0, a, weight="cos", wvar=p)[0]
        im = -integrate.quad(lambda z: 1.0 + z**k, 0.0, a, weight="sin", wvar=p)[0]
        return complex(re, im)

    def integrand(p):
        if p == 0.0:
            return (x + x ** (k + 1) / (k + 1)) * (y + y ** (k + 1) / (k + 1))
        return (transform(x, p) * transform(y, p).conjugate()).real / (1.0 + p * p)

    # the integrand is even in p
    val = integrate.quad(integrand, 0.0, pmax, limit=4000, epsabs=1e-11, epsrel=1e-11)[0]
    return 2.0 * val


def dual_norm_sobolev(nu: GridMeasure, k: float, tol: float = 1e-10) -> float:
    """Norm of nu in the dual of L^{2,0}_{2,1+E^k} (requires k > 1/2)."""
    if not k > 0.5:
        raise ValueError("Sobolev dual norm needs k > 1/2")
    C = _sobolev_cells(nu.grid.delta, nu.grid.nbins, float(k))
    t = tail_function(nu).values
    q = 0.5 * float(t @ C @ t)
    if q < 0:
        scale = 0.5 * float(np.abs(t) @ np.abs(C) @ np.abs(t))
        if q < -tol * max(scale, 1e-300):
            raise ArithmeticError(f"negative quadratic form {q:g}: quadrature failure")
        q = 0.0
    return math.sqrt(q)


def sobolev_gram(grid: Grid, k: float) -> np.ndarray:
    """Matrix S with ||nu||^2 = w^T S w for active weights w."""
    C = _sobolev_cells(grid.delta, grid.nbins, float(k))
    # tail = L w with L upper-triangular ones
    L = np.triu(np.ones((grid.nbins, grid.nbins)))
    return 0.5 * L.T @ C @ L


def norms_report(nu: GridMeasure, k: float) -> str:
    rep = {
        "k": k,
        "weighted": weighted_norm(nu, k),
        "m1_dual": dual_norm_m1(nu, k),
    }
    if k > 0.5:
        rep["sobolev_dual"] = dual_norm_sobolev(nu, k)
    return json.dumps(rep)
