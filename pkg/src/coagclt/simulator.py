"""Exact event-driven simulation of the scaled coagulation process Z^h_t.

The particle system is stored as per-bin counts.  Two Fenwick trees over the
active bins (one of counts, one of masses in grid units) give O(log N)
uniform and mass-proportional particle draws, which is all the constant and
additive kernels need.  Every other kernel is simulated by thinning against
the majorant C (1 + x + y), whose pair sum is a mixture of the two.

Particles heavier than the last active bin move to the inert overflow bins
and take no further part in the dynamics.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numba as nb
import numpy as np

from .kernel import KernelSpec
from .measure import Grid, GridMeasure

MODE_CONSTANT, MODE_ADDITIVE, MODE_THINNING = 0, 1, 2

# layout of the int64 status vector shared with the jitted loop
N_TOTAL, N_ACTIVE, MASS_ACTIVE, MASS_TOTAL, N_EVENTS, N_PROPOSALS, LOG_POS = range(7)


# ------------------------------------------------------------ jitted core


@nb.njit(cache=True, nogil=True)
def _fw_add(tree, i, v):
    n = tree.shape[0] - 1
    while i <= n:
        tree[i] += v
        i += i & (-i)


@nb.njit(cache=True, nogil=True)
def _fw_find(tree, u):
    """Smallest 1-based index whose prefix sum exceeds u (0 <= u < total)."""
    n = tree.shape[0] - 1
    step = 1
    while step * 2 <= n:
        step *= 2
    pos = 0
    while step > 0:
        nxt = pos + step
        if nxt <= n and tree[nxt] <= u:
            pos = nxt
            u -= tree[nxt]
        step >>= 1
    return pos + 1


@nb.njit(cache=True, nogil=True)
def _build_trees(counts, nbins, ctree, mtree, st):
    ctree[:] = 0
    mtree[:] = 0
    n_act = 0
    m_act = 0
    n_tot = 0
    m_tot = 0
    for k in range(2 * nbins):
        c = counts[k]
        n_tot += c
        m_tot += c * (k + 1)
        if k < nbins and c > 0:
            _fw_add(ctree, k + 1, c)
            _fw_add(mtree, k + 1, c * (k + 1))
            n_act += c
            m_act += c * (k + 1)
    st[N_TOTAL] = n_tot
    st[N_ACTIVE] = n_act
    st[MASS_ACTIVE] = m_act
    st[MASS_TOTAL] = m_tot


@nb.njit(cache=True, nogil=True)
def _take(ctree, mtree, b):
    _fw_add(ctree, b, -1)
    _fw_add(mtree, b, -b)


@nb.njit(cache=True, nogil=True)
def _put(ctree, mtree, b):
    _fw_add(ctree, b, 1)
    _fw_add(mtree, b, b)


@nb.njit(cache=True, nogil=True)
def _rate(mode, n, m_units, c, cmaj, delta, h):
    if n < 2:
        return 0.0
    M = m_units * delta
    if mode == 0:
        return h * c * n * (n - 1) * 0.5
    if mode == 1:
        return h * c * (n - 1) * M
    return h * cmaj * (n * (n - 1) * 0.5 + (n - 1) * M)


@nb.njit(cache=True, nogil=True)
def _propose(mode, ctree, mtree, st, delta, rng):
    """Draw an unordered pair of active bins; the first one stays removed."""
    n = st[N_ACTIVE]
    m_units = st[MASS_ACTIVE]
    size_biased = mode == 1
    if mode == 2:
        w_uni = n * (n - 1) * 0.5
        w_add = (n - 1) * m_units * delta
        size_biased = rng.random() * (w_uni + w_add) >= w_uni
    if size_biased:
        b1 = _fw_find(mtree, rng.integers(0, m_units))
    else:
        b1 = _fw_find(ctree, rng.integers(0, n))
    _take(ctree, mtree, b1)
    b2 = _fw_find(ctree, rng.integers(0, n - 1))
    return b1, b2


@nb.njit(cache=True, nogil=True)
def _accept(mode, b1, b2, kmat, cmaj, delta, rng):
    if mode != 2:
        return True
    bound = cmaj * (1.0 + (b1 + b2) * delta)
    return rng.random() * bound < kmat[b1 - 1, b2 - 1]


@nb.njit(cache=True, nogil=True)
def _merge(counts, ctree, mtree, st, nbins, b1, b2):
    # b1 is already out of the trees
    _take(ctree, mtree, b2)
    counts[b1 - 1] -= 1
    counts[b2 - 1] -= 1
    b = b1 + b2
    counts[b - 1] += 1
    st[N_TOTAL] -= 1
    if b <= nbins:
        _put(ctree, mtree, b)
        st[N_ACTIVE] -= 1
    else:
        st[N_ACTIVE] -= 2
        st[MASS_ACTIVE] -= b
    st[N_EVENTS] += 1


@nb.njit(cache=True, nogil=True)
def _advance(counts, ctree, mtree, st, nbins, mode, c, cmaj, kmat, delta, h,
             t, t_end, rng, log, do_log):
    """Run events until the clock passes ``t_end``; returns t_end.

    A holding time overshooting t_end is discarded, which is exact by
    memorylessness of the exponential clock.
    """
    while True:
        rate = _rate(mode, st[N_ACTIVE], st[MASS_ACTIVE], c, cmaj, delta, h)
        if rate <= 0.0:
            return t_end
        t += rng.exponential() / rate
        if t > t_end:
            return t_end
        b1, b2 = _propose(mode, ctree, mtree, st, delta, rng)
        st[N_PROPOSALS] += 1
        if not _accept(mode, b1, b2, kmat, cmaj, delta, rng):
            _put(ctree, mtree, b1)
            continue
        _merge(counts, ctree, mtree, st, nbins, b1, b2)
        if do_log:
            p = st[LOG_POS]
            log[p, 0] = t
            log[p, 1] = b1 * delta
            log[p, 2] = b2 * delta
            log[p, 3] = (b1 + b2) * delta
            st[LOG_POS] = p + 1


@nb.njit(cache=True, nogil=True)
def _step(counts, ctree, mtree, st, nbins, mode, c, cmaj, kmat, delta, h, rng, out):
    dt = 0.0
    while True:
        rate = _rate(mode, st[N_ACTIVE], st[MASS_ACTIVE], c, cmaj, delta, h)
        if rate <= 0.0:
            return -1.0
        dt += rng.exponential() / rate
        b1, b2 = _propose(mode, ctree, mtree, st, delta, rng)
        st[N_PROPOSALS] += 1
        if _accept(mode, b1, b2, kmat, cmaj, delta, rng):
            _merge(counts, ctree, mtree, st, nbins, b1, b2)
            out[0] = b1
            out[1] = b2
            return dt
        _put(ctree, mtree, b1)


@nb.njit(cache=True, nogil=True)
def _sample_pairs(ctree, mtree, st, mode, cmaj, kmat, delta, rng, size, out):
    proposals = 0
    for s in range(size):
        while True:
            b1, b2 = _propose(mode, ctree, mtree, st, delta, rng)
            proposals += 1
            ok = _accept(mode, b1, b2, kmat, cmaj, delta, rng)
            _put(ctree, mtree, b1)
            if ok:
                break
        if b1 <= b2:
            out[s, 0] = b1
            out[s, 1] = b2
        else:
            out[s, 0] = b2
            out[s, 1] = b1
    return proposals


@nb.njit(cache=True, nogil=True)
def _run_path(counts0, nbins, mode, c, cmaj, kmat, delta, h, times, G, rng,
              vals, snaps, do_snap):
    """One replica: functional values (and optionally counts) at ``times``."""
    counts = counts0.copy()
    ctree = np.zeros(nbins + 1, np.int64)
    mtree = np.zeros(nbins + 1, np.int64)
    st = np.zeros(7, np.int64)
    _build_trees(counts, nbins, ctree, mtree, st)
    log = np.zeros((1, 4))
    t = 0.0
    nf = G.shape[0]
    for it in range(times.shape[0]):
        t = _advance(counts, ctree, mtree, st, nbins, mode, c, cmaj, kmat, delta, h,
                     t, times[it], rng, log, False)
        for f in range(nf):
            s = 0.0
            for k in range(2 * nbins):
                if counts[k] != 0:
                    s += G[f, k] * counts[k]
            vals[it, f] = h * s
        if do_snap:
            snaps[it, :] = counts
    return st[N_EVENTS]


# ------------------------------------------------------------ Python API


def sampling_mode(spec: KernelSpec) -> int:
    if spec.cutoff is None and spec.family == "constant":
        return MODE_CONSTANT
    if spec.cutoff is None and spec.family == "additive":
        return MODE_ADDITIVE
    return MODE_THINNING


def kernel_table(spec: KernelSpec, grid: Grid) -> np.ndarray:
    if sampling_mode(spec) == MODE_THINNING:
        return np.ascontiguousarray(spec.matrix(grid.masses))
    return np.zeros((1, 1))


@dataclass
class ParticleState:
    """Particle counts per bin with cached aggregates and Fenwick trees.

    ``counts`` has length 2N: active bins first, then the overflow bins.
    Masses in the cached totals are integers in units of ``grid.delta``.
    """

    grid: Grid
    counts: np.ndarray
    h: float
    ctree: np.ndarray = field(init=False, repr=False)
    mtree: np.ndarray = field(init=False, repr=False)
    status: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("scale h must be positive")
        counts = np.zeros(2 * self.grid.nbins, np.int64)
        c = np.asarray(self.counts, dtype=np.int64)
        counts[: c.size] = c
        if np.any(counts < 0):
            raise ValueError("negative particle count")
        self.counts = counts
        self.ctree = np.zeros(self.grid.nbins + 1, np.int64)
        self.mtree = np.zeros(self.grid.nbins + 1, np.int64)
        self.status = np.zeros(7, np.int64)
        _build_trees(self.counts, self.grid.nbins, self.ctree, self.mtree, self.status)

    @classmethod
    def monodisperse(cls, grid: Grid, n: int, h: float, bin: int = 1) -> "ParticleState":
        counts = np.zeros(grid.nbins, np.int64)
        counts[bin - 1] = n
        return cls(grid, counts, h)

    @classmethod
    def from_masses(cls, grid: Grid, masses, h: float) -> "ParticleState":
        counts = np.zeros(grid.nbins, np.int64)
        for m in masses:
            counts[grid.index_of(m)] += 1
        return cls(grid, counts, h)

    def copy(self) -> "ParticleState":
        return ParticleState(self.grid, self.counts.copy(), self.h)

    @property
    def n_total(self) -> int:
        return int(self.status[N_TOTAL])

    @property
    def n_active(self) -> int:
        return int(self.status[N_ACTIVE])

    @property
    def mass_total(self) -> int:
        """Total mass in grid units, overflow included."""
        return int(self.status[MASS_TOTAL])

    @property
    def mass_active(self) -> int:
        return int(self.status[MASS_ACTIVE])

    @property
    def n_events(self) -> int:
        return int(self.status[N_EVENTS])

    @property
    def n_proposals(self) -> int:
        return int(self.status[N_PROPOSALS])

    def rederive(self) -> tuple[int, int]:
        """(n_total, mass_total) recomputed from the raw counts."""
        k = np.arange(1, 2 * self.grid.nbins + 1)
        return int(self.counts.sum()), int(self.counts @ k)

    def check_bounds(self, e0: float, e1: float) -> bool:
        """Membership of h delta_x in the reduced space {(1,Y) <= e0, (E,Y) <= e1}."""
        ok = self.h * self.n_total <= e0 and self.h * self.mass_total * self.grid.delta <= e1
        if not ok:
            warnings.warn("particle state outside the declared (e0, e1) bounds", stacklevel=2)
        return ok


@dataclass
class EventLog:
    times: np.ndarray
    mass_i: np.ndarray
    mass_j: np.ndarray
    merged: np.ndarray

    def __len__(self):
        return self.times.size

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "m_i", "m_j", "merged"])
            for row in zip(self.times, self.mass_i, self.mass_j, self.merged):
                w.writerow([repr(float(v)) for v in row])


def empirical_measure(state: ParticleState) -> GridMeasure:
    n = state.grid.nbins
    return GridMeasure(state.grid, state.h * state.counts[:n], state.h * state.counts[n:])


def total_rate(state: ParticleState, spec: KernelSpec) -> float:
    """Total jump intensity; for thinned kernels this is the majorant total."""
    return _rate(sampling_mode(spec), state.n_active, state.mass_active, spec.constant,
                 spec.majorant_constant, state.grid.delta, state.h)


def exact_total_rate(state: ParticleState, spec: KernelSpec) -> float:
    """h * sum over unordered active pairs of K, by the pair-sum identity."""
    n = state.grid.nbins
    c = state.counts[:n].astype(float)
    K = spec.matrix(state.grid.masses)
    return state.h * 0.5 * (c @ K @ c - c @ np.diag(K))


def _args(state, spec):
    return (sampling_mode(spec), spec.constant, spec.majorant_constant,
            kernel_table(spec, state.grid), state.grid.delta, state.h)


def sample_pair(state: ParticleState, spec: KernelSpec, rng: np.random.Generator,
                size: Optional[int] = None):
    """Draw unordered pair(s) of masses with probability proportional to K.

    The state is left untouched.  With ``size`` returns an array of shape
    (size, 2) of sorted mass pairs.
    """
    if state.n_active < 2:
        raise ValueError("need at least two active particles")
    mode, _, cmaj, kmat, delta, _ = _args(state, spec)
    out = np.zeros((1 if size is None else size, 2), np.int64)
    _sample_pairs(state.ctree, state.mtree, state.status, mode, cmaj, kmat, delta, rng,
                  out.shape[0], out)
    masses = out * delta
    return tuple(masses[0]) if size is None else masses


def proposal_ratio(state: ParticleState, spec: KernelSpec, rng: np.random.Generator,
                   size: int) -> float:
    """Mean number of majorant proposals per accepted pair (1 for exact modes)."""
    mode, _, cmaj, kmat, delta, _ = _args(state, spec)
    out = np.zeros((size, 2), np.int64)
    n = _sample_pairs(state.ctree, state.mtree, state.status, mode, cmaj, kmat, delta, rng,
                      size, out)
    return n / size


def step(state: ParticleState, spec: KernelSpec, rng: np.random.Generator):
    """Perform one coagulation event in place.

    Returns ``(dt, (m_i, m_j, merged))`` or ``(inf, None)`` when fewer than
    two active particles remain (absorbing state).
    """
    mode, c, cmaj, kmat, delta, h = _args(state, spec)
    out = np.zeros(2, np.int64)
    dt = _step(state.counts, state.ctree, state.mtree, state.status, state.grid.nbins,
               mode, c, cmaj, kmat, delta, h, rng, out)
    if dt < 0:
        return math.inf, None
    b1, b2 = int(out[0]), int(out[1])
    return dt, (b1 * delta, b2 * delta, (b1 + b2) * delta)


def simulate_path(init: ParticleState, spec: KernelSpec, times, rng: np.random.Generator,
                  log: bool = False):
    """Snapshots of Z^h_t at the sorted ``times`` (the initial state is not modified).

    With ``log=True`` also returns the :class:`EventLog` of the path.
    """
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("times must be non-negative and sorted")
    state = init.copy()
    mode, c, cmaj, kmat, delta, h = _args(state, spec)
    buf = np.zeros((max(state.n_total, 1), 4))
    snaps = []
    t = 0.0
    for te in times:
        t = _advance(state.counts, state.ctree, state.mtree, state.status, state.grid.nbins,
                     mode, c, cmaj, kmat, delta, h, t, float(te), rng, buf, log)
        snaps.append(empirical_measure(state))
    if not log:
        return snaps
    p = int(state.status[LOG_POS])
    ev = EventLog(buf[:p, 0].copy(), buf[:p, 1].copy(), buf[:p, 2].copy(), buf[:p, 3].copy())
    return snaps, ev


def run_replica(init: ParticleState, spec: KernelSpec, times, G: np.ndarray,
                rng: np.random.Generator, snapshots: bool = False, _cache=None):
    """Functional values h * (G_f, counts) at each time for one replica.

    ``G`` has shape (F, 2N) (functions on the extended grid).  Returns an
    array (T, F), plus the (T, 2N) count snapshots when requested.
    """
    times = np.asarray(times, dtype=float)
    nb2 = 2 * init.grid.nbins
    mode, c, cmaj, kmat, delta, h = _cache if _cache is not None else _args(init, spec)
    vals = np.empty((times.size, G.shape[0]))
    snaps = np.empty((times.size, nb2), np.int64) if snapshots else np.empty((1, nb2), np.int64)
    _run_path(init.counts, init.grid.nbins, mode, c, cmaj, kmat, delta, h, times,
              np.ascontiguousarray(G, dtype=float), rng, vals, snaps, snapshots)
    return (vals, snaps) if snapshots else vals
