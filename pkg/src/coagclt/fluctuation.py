"""Gaussian fluctuation limit of the coagulation process.

For test functions phi_1..phi_n and times t_1 <= ... <= t_n the limit of
((phi_j, F^h_{t_j}))_j is Gaussian with mean (U^{0,t_j} phi_j, F_0) and
covariance

    Sigma_lk = 2 int_0^{min(t_l, t_k)} Pi(s, U^{s,t_l} phi_l, U^{s,t_k} phi_k) ds,

where Pi(s, phi, psi) = 1/4 sum_{x,z} dphi(x,z) dpsi(x,z) K(x,z) mu_s(x) mu_s(z)
and dphi(x,z) = phi(x+z) - phi(x) - phi(z).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .kernel import KernelSpec
from .kinetic import KineticSolution
from .measure import GridFunction, GridMeasure, pair
from .variation import PropagatorField, _kmat, solve_backward


def fluctuation_field(z: GridMeasure, mu: GridMeasure, h: float) -> GridMeasure:
    """(z - mu) / sqrt(h)."""
    if not h > 0:
        raise ValueError("h must be positive")
    return (z - mu) / math.sqrt(h)


@nb.njit(cache=True, nogil=True)
def _pi(mu, phi, psi, K, nbins):
    s = 0.0
    for i in range(nbins):
        mi = mu[i]
        if mi == 0.0:
            continue
        for j in range(nbins):
            mj = mu[j]
            if mj == 0.0:
                continue
            dphi = phi[i + j + 1] - phi[i] - phi[j]
            if dphi == 0.0:
                continue
            s += dphi * (psi[i + j + 1] - psi[i] - psi[j]) * K[i, j] * mi * mj
    return 0.25 * s


def pi_form(mu: GridMeasure, phi: GridFunction, psi: GridFunction, spec: KernelSpec) -> float:
    if not (mu.grid == phi.grid == psi.grid):
        raise ValueError("grid mismatch")
    K = spec.matrix(mu.grid.masses)
    return float(_pi(mu.ext, np.ascontiguousarray(phi.ext), np.ascontiguousarray(psi.ext), K,
                     mu.grid.nbins))


def _pi_path(pa: PropagatorField, pb: PropagatorField, upto: int, K, kinetic):
    n = kinetic.grid.nbins
    return np.array([_pi(kinetic.states[s], pa.values[s], pb.values[s], K, n)
                     for s in range(upto + 1)])


def _trapezoid(y, x):
    if y.size < 2:
        return 0.0
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def ou_variance(phi: GridFunction, t: float, spec: KernelSpec, kinetic: KineticSolution) -> float:
    """Limiting variance 2 int_0^t Pi(s, U^{s,t} phi, U^{s,t} phi) ds."""
    it = kinetic.index(t)
    if it == 0:
        return 0.0
    pf = solve_backward(phi, t, spec, kinetic)
    vals = _pi_path(pf, pf, it, _kmat(spec, kinetic), kinetic)
    return 2.0 * _trapezoid(vals, kinetic.mesh[: it + 1])


@dataclass
class OUCovariance:
    times: np.ndarray
    names: list
    mean: np.ndarray
    cov: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.cov).min())

    def is_psd(self, rtol: float = 1e-10) -> bool:
        return self.min_eigenvalue >= -rtol * max(float(np.trace(self.cov)), 0.0)

    def to_json(self) -> str:
        return json.dumps({
            "times": self.times.tolist(),
            "functions": self.names,
            "means": self.mean.tolist(),
            "covariance": self.cov.tolist(),
            "quadrature": self.meta,
        }, indent=2)


def ou_covariance(times, phis, F0: GridMeasure, spec: KernelSpec,
                  kinetic: KineticSolution) -> OUCovariance:
    """Mean vector and covariance of the limiting Gaussian law at several times."""
    times = np.asarray(times, dtype=float)
    if times.size != len(phis):
        raise ValueError("need one test function per time")
    if np.any(np.diff(times) < 0):
        raise ValueError("times must be sorted")
    K = _kmat(spec, kinetic)
    idx = [kinetic.index(t) for t in times]
    fields = [solve_backward(phi, t, spec, kinetic) for phi, t in zip(phis, times)]
    mean = np.array([pair(f.at(0.0), F0) for f in fields])
    n = times.size
    cov = np.zeros((n, n))
    for l in range(n):
        for k in range(l, n):
            upto = min(idx[l], idx[k])
            vals = _pi_path(fields[l], fields[k], upto, K, kinetic)
            cov[l, k] = cov[k, l] = 2.0 * _trapezoid(vals, kinetic.mesh[: upto + 1])
    meta = {"rule": "trapezoid", "dt": kinetic.dt, "mesh_points": int(kinetic.mesh.size)}
    names = [p.name or f"phi{j}" for j, p in enumerate(phis)]
    return OUCovariance(times, names, mean, cov, meta)


def char_fn(cov: OUCovariance, p) -> complex:
    """Characteristic function exp(i p.m - p^T Sigma p / 2) of the Gaussian limit."""
    p = np.asarray(p, dtype=float)
    if p.shape != cov.mean.shape:
        raise ValueError("dimension mismatch")
    return complex(np.exp(1j * (p @ cov.mean) - 0.5 * (p @ cov.cov @ p)))


def ou_quadratic_expectation(S: np.ndarray, t: float, spec: KernelSpec,
                             kinetic: KineticSolution, rtol: float = 1e-14) -> float:
    """Limit of E (w_t^T S w_t) for the active weights w_t of F_t when F_0 = 0.

    With S = sum_q lam_q v_q v_q^T this is sum_q lam_q * ou_variance(v_q, t).
    """
    S = np.asarray(S, dtype=float)
    n = kinetic.grid.nbins
    if S.shape != (n, n):
        raise ValueError("quadratic form has the wrong shape")
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    cut = rtol * max(float(np.abs(lam).max()), 0.0)
    total = 0.0
    for q in range(n):
        if abs(lam[q]) <= cut:
            continue
        phi = GridFunction(kinetic.grid, V[:, q], np.zeros(n))
        total += lam[q] * ou_variance(phi, t, spec, kinetic)
    return float(total)
