"""Monte Carlo ensembles of the particle process and their statistics.

Replicas are independent Marcus-Lushnikov paths started from the same
integer configuration.  Each replica records linear functionals (phi, Z_t)
at a declared set of times, optionally centred and scaled into the
fluctuation field F_t = (Z_t - mu_t) / sqrt(h), products of those
(polynomial functionals of order m), and quadratic forms of F_t.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats as sps

from .fluctuation import char_fn, ou_covariance, ou_quadratic_expectation, ou_variance
from .kernel import KernelSpec
from .kinetic import KineticSolution, solve_kinetic
from .measure import Grid, GridFunction, GridMeasure, sobolev_gram
from .simulator import ParticleState, _args, run_replica

CHUNK = 500  # replicas per work unit; fixed so results do not depend on the thread count


class ConfigError(ValueError):
    pass


def replica_rng(master: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(master, spawn_key=(index,))))


# ------------------------------------------------------------ statistics


@dataclass
class EnsembleStats:
    """Streaming central moments of D scalar channels, mergeable across batches.

    Channels are laid out as (time, label) pairs in row-major order.
    ``comoment`` is the D x D matrix of summed cross products of deviations.
    """

    times: np.ndarray
    labels: list
    count: int
    mean: np.ndarray
    m2: np.ndarray
    m3: np.ndarray
    m4: np.ndarray
    comoment: np.ndarray
    seed: Optional[int] = None
    history: list = field(default_factory=list)
    samples: Optional[np.ndarray] = None
    reference: Optional[np.ndarray] = None

    @classmethod
    def from_batch(cls, x, times, labels, seed=None, keep=False) -> "EnsembleStats":
        """x has shape (n, T, L)."""
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        flat = x.reshape(n, -1)
        mean = flat.mean(axis=0)
        d = flat - mean
        d2 = d * d
        T, L = x.shape[1], x.shape[2]
        shape = (T, L)
        return cls(np.asarray(times, dtype=float), list(labels), n, mean.reshape(shape),
                   d2.sum(axis=0).reshape(shape), (d2 * d).sum(axis=0).reshape(shape),
                   (d2 * d2).sum(axis=0).reshape(shape), d.T @ d, seed, [n],
                   x.copy() if keep else None)

    def merge(self, other: "EnsembleStats") -> "EnsembleStats":
        if list(self.labels) != list(other.labels) or not np.array_equal(self.times, other.times):
            raise ValueError("cannot merge stats over different channels")
        na, nb = self.count, other.count
        n = na + nb
        d = other.mean - self.mean
        mean = self.mean + d * (nb / n)
        m2 = self.m2 + other.m2 + d * d * (na * nb / n)
        m3 = (self.m3 + other.m3 + d**3 * (na * nb * (na - nb) / n**2)
              + 3.0 * d * (na * other.m2 - nb * self.m2) / n)
        m4 = (self.m4 + other.m4 + d**4 * (na * nb * (na * na - na * nb + nb * nb) / n**3)
              + 6.0 * d * d * (na * na * other.m2 + nb * nb * self.m2) / n**2
              + 4.0 * d * (na * other.m3 - nb * self.m3) / n)
        df = d.ravel()
        com = self.comoment + other.comoment + np.outer(df, df) * (na * nb / n)
        samples = None
        if self.samples is not None and other.samples is not None:
            samples = np.concatenate([self.samples, other.samples])
        return EnsembleStats(self.times, self.labels, n, mean, m2, m3, m4, com, self.seed,
                             self.history + other.history, samples, self.reference)

    @property
    def variance(self) -> np.ndarray:
        return self.m2 / max(self.count - 1, 1)

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(self.variance / self.count)

    @property
    def skewness(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.m2 > 0, math.sqrt(self.count) * self.m3 / self.m2**1.5, 0.0)

    @property
    def excess_kurtosis(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.m2 > 0, self.count * self.m4 / self.m2**2 - 3.0, 0.0)

    @property
    def covariance(self) -> np.ndarray:
        return self.comoment / max(self.count - 1, 1)

    def channel(self, t: float, label: str) -> int:
        it = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[it] - t) > 1e-12:
            raise KeyError(f"time {t} not recorded")
        return it * len(self.labels) + self.labels.index(label)

    def to_dict(self) -> dict:
        return {
            "R": self.count,
            "seed": self.seed,
            "times": self.times.tolist(),
            "labels": self.labels,
            "mean": self.mean.tolist(),
            "variance": self.variance.tolist(),
            "skewness": self.skewness.tolist(),
            "excess_kurtosis": self.excess_kurtosis.tolist(),
            "reference": None if self.reference is None else self.reference.tolist(),
        }


def merge_all(parts) -> EnsembleStats:
    """Pairwise (tree) reduction in list order."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to merge")
    while len(parts) > 1:
        nxt = [parts[i].merge(parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


# ------------------------------------------------------------- ensembles


@dataclass
class EnsembleConfig:
    """One ensemble: kernel, grid, scale h, initial law, times and functionals.

    ``mu0`` defaults to the unit-mass monodisperse measure on bin 1; its
    weights are rounded down to multiples of h so that F_0 = 0 exactly.
    ``products`` maps a label to a tuple of linear functional names whose
    values are multiplied, i.e. (g_1 x ... x g_m, Y^{xm}).
    """

    spec: KernelSpec
    grid: Grid
    h: float
    times: tuple
    functionals: dict
    products: dict = field(default_factory=dict)
    R: int = 1000
    seed: int = 0
    mu0: Optional[GridMeasure] = None
    dt: float = 1e-3
    threads: int = 1
    centred: bool = False
    keep_samples: bool = False
    quadratic: Optional[np.ndarray] = None  # N x N form on the active weights of F_t
    kinetic: Optional[KineticSolution] = field(default=None, repr=False)

    def validate(self) -> None:
        if not self.h > 0:
            raise ConfigError("h must be positive")
        if int(self.R) < 1:
            raise ConfigError("R must be at least 1")
        if int(self.threads) < 1:
            raise ConfigError("threads must be at least 1")
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size == 0 or np.any(t < 0) or np.any(np.diff(t) <= 0):
            raise ConfigError("times must be a non-empty increasing sequence of non-negative values")
        if not self.functionals and self.quadratic is None:
            raise ConfigError("no functionals requested")
        for name, g in self.functionals.items():
            if g.grid != self.grid:
                raise ConfigError(f"functional {name!r} lives on another grid")
        for name, parts in self.products.items():
            if name in self.functionals:
                raise ConfigError(f"duplicate label {name!r}")
            for p in parts:
                if p not in self.functionals:
                    raise ConfigError(f"product {name!r} refers to unknown functional {p!r}")
        if self.mu0 is not None and self.mu0.grid != self.grid:
            raise ConfigError("initial measure lives on another grid")
        if self.quadratic is not None and np.shape(self.quadratic) != (self.grid.nbins,) * 2:
            raise ConfigError("quadratic form has the wrong shape")

    def initial_counts(self) -> np.ndarray:
        w = (GridMeasure.dirac(self.grid, self.grid.delta) if self.mu0 is None else self.mu0).ext
        if np.any(w < 0):
            raise ConfigError("initial measure must be non-negative")
        return np.floor(w / self.h * (1 + 1e-12)).astype(np.int64)

    def labels(self) -> list:
        out = list(self.functionals) + list(self.products)
        if self.quadratic is not None:
            out.append("quadratic")
        return out

    def to_dict(self) -> dict:
        return {
            "kernel": self.spec.to_dict(),
            "grid": {"delta": self.grid.delta, "N": self.grid.nbins},
            "h": self.h,
            "times": [float(t) for t in self.times],
            "functionals": {k: np.round(v.ext, 15).tolist() for k, v in self.functionals.items()},
            "products": {k: list(v) for k, v in self.products.items()},
            "R": int(self.R),
            "seed": int(self.seed),
            "mu0": None if self.mu0 is None else self.mu0.ext.tolist(),
            "dt": self.dt,
            "centred": self.centred,
            "quadratic": self.quadratic is not None,
        }


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def reference_kinetic(cfg: EnsembleConfig) -> KineticSolution:
    counts = cfg.initial_counts()
    mu0 = GridMeasure.from_ext(cfg.grid, counts * cfg.h)
    return solve_kinetic(mu0, cfg.spec, list(cfg.times), cfg.dt, track=cfg.functionals)


def _linear_reference(cfg: EnsembleConfig, kin: KineticSolution) -> np.ndarray:
    idx = [kin.index(t) for t in cfg.times]
    return np.array([[kin.tracked[name][i] for name in cfg.functionals] for i in idx]).reshape(
        len(idx), len(cfg.functionals))


def _chunk(cfg, counts0, G, lin_ref, mu_active, start, stop):
    init = ParticleState(cfg.grid, counts0, cfg.h)
    cache = _args(init, cfg.spec)
    times = np.asarray(cfg.times, dtype=float)
    names = list(cfg.functionals)
    T = times.size
    n = cfg.grid.nbins
    scale = 1.0 / math.sqrt(cfg.h)
    out = np.empty((stop - start, T, len(cfg.labels())))
    want_snap = cfg.quadratic is not None
    Gc = G if G.shape[0] else np.zeros((1, 2 * n))
    for r in range(stop - start):
        res = run_replica(init, cfg.spec, times, Gc, replica_rng(cfg.seed, start + r),
                          snapshots=want_snap, _cache=cache)
        vals, snaps = res if want_snap else (res, None)
        vals = vals[:, : len(names)]
        if cfg.centred:
            vals = (vals - lin_ref) * scale
        cols = [vals]
        for parts in cfg.products.values():
            p = np.ones(T)
            for name in parts:
                p = p * vals[:, names.index(name)]
            cols.append(p[:, None])
        if want_snap:
            w = (snaps[:, :n] * cfg.h - mu_active) * scale
            cols.append(np.einsum("ti,ij,tj->t", w, cfg.quadratic, w)[:, None])
        out[r] = np.concatenate(cols, axis=1)
    return out


def run_ensemble(cfg: EnsembleConfig) -> EnsembleStats:
    """R independent replicas; deterministic for a fixed (seed, R) at any thread count."""
    cfg.validate()
    kin = cfg.kinetic if cfg.kinetic is not None else reference_kinetic(cfg)
    counts0 = cfg.initial_counts()
    names = list(cfg.functionals)
    G = np.array([cfg.functionals[k].ext for k in names]).reshape(len(names), 2 * cfg.grid.nbins)
    lin_ref = _linear_reference(cfg, kin)
    mu_active = np.array([kin.mu_ext(t)[: cfg.grid.nbins] for t in cfg.times])

    ref = [lin_ref if not cfg.centred else np.zeros_like(lin_ref)]
    for parts in cfg.products.values():
        p = np.ones(len(cfg.times))
        for name in parts:
            p = p * ref[0][:, names.index(name)]
        ref.append(p[:, None])
    if cfg.quadratic is not None:
        ref.append(np.zeros((len(cfg.times), 1)))
    reference = np.concatenate(ref, axis=1)

    bounds = [(s, min(s + CHUNK, cfg.R)) for s in range(0, int(cfg.R), CHUNK)]
    labels = cfg.labels()

    def work(b):
        x = _chunk(cfg, counts0, G, lin_ref, mu_active, *b)
        return EnsembleStats.from_batch(x, cfg.times, labels, cfg.seed, cfg.keep_samples)

    if cfg.threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=int(cfg.threads)) as ex:
            parts = list(ex.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    st = merge_all(parts)
    st.reference = reference
    return st


# ------------------------------------------------------------ rate fits


@dataclass
class RateFit:
    abscissae: np.ndarray
    ordinates: np.ndarray
    slope: float
    intercept: float
    stderr: float
    r2: float

    @classmethod
    def fit(cls, x, y) -> "RateFit":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.size < 3:
            raise ValueError("a rate fit needs at least 3 points")
        if np.any(y <= 0) or np.any(x <= 0):
            raise ValueError("log-log fit needs positive values")
        r = sps.linregress(np.log(x), np.log(y))
        return cls(x, y, float(r.slope), float(r.intercept), float(r.stderr), float(r.rvalue**2))

    def to_dict(self) -> dict:
        return {"x": self.abscissae.tolist(), "y": self.ordinates.tolist(), "slope": self.slope,
                "intercept": self.intercept, "slope_stderr": self.stderr, "r2": self.r2}


def _with(cfg: EnsembleConfig, **kw) -> EnsembleConfig:
    d = dict(cfg.__dict__)
    d.update(kw)
    return EnsembleConfig(**d)


def _ladder_errors(cfg, ladder, centred):
    """Per h: sup over times of |mean - reference| for every label, plus MC stderr at the argmax."""
    if len(ladder) < 3 or len(set(ladder)) != len(ladder) or min(ladder) <= 0:
        raise ConfigError("the h ladder needs at least 3 distinct positive values")
    points = []
    for h in ladder:
        st = run_ensemble(_with(cfg, h=h, centred=centred, kinetic=None))
        err = np.abs(st.mean - st.reference)
        arg = err.argmax(axis=0)
        cols = range(err.shape[1])
        points.append({
            "h": h,
            "error": err.max(axis=0),
            "stderr": st.stderr[arg, cols],
            "per_time": err,
            "stats": st,
        })
    return points


def _rate_report(experiment, cfg, ladder, points, labels, window):
    fits = {}
    for j, lab in enumerate(labels):
        e = np.array([p["error"][j] for p in points])
        se = np.array([p["stderr"][j] for p in points])
        entry = {"errors": e.tolist(), "stderr": se.tolist()}
        noisy = bool(np.any(e < 2.0 * se))
        degenerate = bool(np.all(e == 0.0))
        entry["noise_limited"] = noisy
        entry["degenerate"] = degenerate
        if degenerate:
            entry["fit"] = None
            entry["passed"] = True
        else:
            f = RateFit.fit(ladder, np.maximum(e, 1e-300))
            entry["fit"] = f.to_dict()
            entry["passed"] = (not noisy) and window[0] <= f.slope <= window[1]
        fits[lab] = entry
    return {
        "experiment": experiment,
        "config_hash": config_hash(cfg.to_dict()),
        "ladder": list(ladder),
        "times": [float(t) for t in cfg.times],
        "R": int(cfg.R),
        "seed": int(cfg.seed),
        "window": list(window),
        "sup_over": "declared time sample",
        "fits": fits,
        "passed": all(v["passed"] for v in fits.values()),
    }


def lln_rate(cfg: EnsembleConfig, ladder, window=(0.8, 1.2)) -> dict:
    """sup_s |E (g, Z_s^{xm}) - (g, mu_s^{xm})| along the h ladder, fitted against h."""
    labels = _with(cfg, quadratic=None).labels()
    pts = _ladder_errors(_with(cfg, quadratic=None), ladder, centred=False)
    return _rate_report("lln_rate", cfg, ladder, pts, labels, window)


def clt_rate(cfg: EnsembleConfig, ladder, window=(0.35, 0.65)) -> dict:
    """sup_s |E (phi, F_s)| with F_0 = 0, fitted against h."""
    labels = _with(cfg, quadratic=None).labels()
    pts = _ladder_errors(_with(cfg, quadratic=None), ladder, centred=True)
    return _rate_report("clt_rate", cfg, ladder, pts, labels, window)


def clt_gaussianity(cfg: EnsembleConfig, phi: str, t: float, var_tol=0.1, skew_tol=0.1,
                    kurt_tol=0.25) -> dict:
    """Sample law of (phi, F_t) against the Gaussian limit."""
    c = _with(cfg, times=(t,), functionals={phi: cfg.functionals[phi]}, products={},
              quadratic=None, centred=True, keep_samples=True, kinetic=None)
    kin = reference_kinetic(c)
    st = run_ensemble(_with(c, kinetic=kin))
    sigma2 = ou_variance(c.functionals[phi], t, c.spec, kin)
    var = float(st.variance[0, 0])
    skew = float(st.skewness[0, 0])
    kurt = float(st.excess_kurtosis[0, 0])
    x = st.samples[:, 0, 0]
    if sigma2 > 0:
        ks = sps.kstest(x, "norm", args=(0.0, math.sqrt(sigma2)))
        ks_d, ks_p = float(ks.statistic), float(ks.pvalue)
        ratio = var / sigma2
    else:
        ks_d, ks_p = float(np.max(np.abs(x))), float("nan")
        ratio = float("nan")
    if sigma2 == 0.0:
        passed = var == 0.0
    else:
        passed = abs(ratio - 1.0) <= var_tol and abs(skew) <= skew_tol and abs(kurt) <= kurt_tol
    return {
        "experiment": "clt_gaussianity",
        "config_hash": config_hash(c.to_dict()),
        "phi": phi, "t": t, "h": c.h, "R": int(c.R), "seed": int(c.seed),
        "sample_mean": float(st.mean[0, 0]),
        "sample_variance": var,
        "ou_variance": sigma2,
        "variance_ratio": ratio,
        "skewness": skew,
        "excess_kurtosis": kurt,
        "ks_distance": ks_d,
        "ks_pvalue": ks_p,
        "ks_critical_99": 1.628 / math.sqrt(c.R),
        "tolerances": {"variance": var_tol, "skewness": skew_tol, "excess_kurtosis": kurt_tol},
        "passed": bool(passed),
    }


def finite_dim_cov_test(cfg: EnsembleConfig, times, phis, p_grid=None, level=0.95) -> dict:
    """Sample covariance of ((phi_j, F_{t_j}))_j entrywise against the Gaussian limit."""
    times = tuple(float(t) for t in times)
    if len(times) != len(phis):
        raise ConfigError("one test function per time")
    grid_t = tuple(sorted(set(times)))
    funcs = {p: cfg.functionals[p] for p in dict.fromkeys(phis)}
    c = _with(cfg, times=grid_t, functionals=funcs, products={}, quadratic=None,
              centred=True, keep_samples=True, kinetic=None)
    kin = reference_kinetic(c)
    st = run_ensemble(_with(c, kinetic=kin))
    F0 = GridMeasure.zeros(c.grid)
    pred = ou_covariance(times, [funcs[p] for p in phis], F0, c.spec, kin)
    cols = [grid_t.index(t) * len(st.labels) + st.labels.index(p) for t, p in zip(times, phis)]
    X = st.samples.reshape(st.count, -1)[:, cols]
    n = len(cols)
    S = st.covariance[np.ix_(cols, cols)]
    d = X - X.mean(axis=0)
    z = sps.norm.ppf(0.5 + level / 2)
    entries = []
    ok = True
    for a in range(n):
        for b in range(a, n):
            prod = d[:, a] * d[:, b]
            half = z * float(prod.std(ddof=1)) / math.sqrt(st.count)
            inside = abs(S[a, b] - pred.cov[a, b]) <= half
            ok &= inside
            entries.append({"i": a, "j": b, "sample": float(S[a, b]), "predicted": float(pred.cov[a, b]),
                            "half_width": half, "inside": bool(inside)})
    if p_grid is None:
        p_grid = [np.full(n, s) for s in (0.25, 0.5, 1.0)] + [np.eye(n)[0], np.eye(n)[-1] - 0.5 * np.eye(n)[0]]
    cf = []
    for p in p_grid:
        p = np.asarray(p, dtype=float)
        emp = complex(np.mean(np.exp(1j * (X @ p))))
        th = char_fn(pred, p)
        cf.append({"p": p.tolist(), "empirical": [emp.real, emp.imag], "predicted": [th.real, th.imag],
                   "abs_diff": abs(emp - th)})
    return {
        "experiment": "finite_dim_cov_test",
        "config_hash": config_hash(c.to_dict()),
        "times": list(times), "functions": list(phis), "h": c.h, "R": int(c.R), "seed": int(c.seed),
        "predicted_mean": pred.mean.tolist(),
        "sample_mean": X.mean(axis=0).tolist(),
        "predicted_cov": pred.cov.tolist(),
        "sample_cov": S.tolist(),
        "entries": entries,
        "level": level,
        "char_fn": cf,
        "char_fn_tolerance": 4.0 / math.sqrt(st.count),
        "passed": bool(ok),
    }


def second_moment_diagnostic(cfg: EnsembleConfig, k: float, ladder, level=0.95) -> dict:
    """sup_t E ||F_t||^2 in the Sobolev dual norm along an h ladder.

    Growth is tested by a weighted regression of the sup on log(1/h) with the
    Monte Carlo variances as weights; the check fails only if the slope is
    positive at the given one-sided confidence level.
    """
    if not k > 0.5:
        raise ConfigError("k must exceed 1/2")
    S = sobolev_gram(cfg.grid, k)
    pts = []
    for h in ladder:
        st = run_ensemble(_with(cfg, h=h, functionals={}, products={}, quadratic=S,
                                centred=True, keep_samples=False, kinetic=None))
        m = st.mean[:, -1]
        i = int(np.argmax(m))
        pts.append({"h": h, "sup": float(m[i]), "stderr": float(st.stderr[i, -1]),
                    "argmax_t": float(st.times[i]), "per_time": m.tolist()})
    x = np.log(1.0 / np.asarray(ladder, dtype=float))
    y = np.array([p["sup"] for p in pts])
    se = np.array([p["stderr"] for p in pts])
    finite = bool(np.all(np.isfinite(y)))
    if len(ladder) >= 2 and np.all(se > 0):
        w = 1.0 / se**2
        xb = np.sum(w * x) / np.sum(w)
        sxx = np.sum(w * (x - xb) ** 2)
        slope = float(np.sum(w * (x - xb) * y) / sxx)
        slope_se = float(1.0 / math.sqrt(sxx))
    else:
        slope, slope_se = 0.0, 0.0
    zq = sps.norm.ppf(level)
    lower = slope - zq * slope_se
    # Gaussian-limit value of the same sup, for reference only
    kin = reference_kinetic(_with(cfg, h=ladder[0], functionals={}, products={}))
    limit = [ou_quadratic_expectation(S, t, cfg.spec, kin) for t in cfg.times]
    return {
        "experiment": "second_moment_diagnostic",
        "config_hash": config_hash(_with(cfg, quadratic=None).to_dict()),
        "k": k, "ladder": list(ladder), "R": int(cfg.R), "seed": int(cfg.seed),
        "points": pts,
        "gaussian_limit": {"per_time": limit, "sup": max(limit)},
        "trend": {"regressor": "log(1/h)", "slope": slope, "slope_stderr": slope_se,
                  "lower_bound": lower, "level": level},
        "passed": bool(finite and lower <= 0.0),
    }
