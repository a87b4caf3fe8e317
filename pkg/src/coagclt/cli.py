"""Command-line front end.

    coagclt solve --config exp.json
    coagclt lln --config ladder.json --replicas 100000 --plot
    coagclt selfcheck

Every run writes into ``<out>/<command>-<hash>/`` where the hash covers the
command and the effective configuration.  A finished directory is reused
unless ``--force`` is given.  Exit status: 0 ok, 1 a checked criterion
failed, 2 bad configuration.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import harness as hz
from .fluctuation import char_fn, ou_covariance, pi_form
from .kernel import KernelSpec
from .kinetic import solve_kinetic
from .measure import Grid, GridFunction, GridMeasure, energy_function
from .simulator import ParticleState, run_replica, simulate_path
from .variation import apply_lambda, solve_backward, solve_second_variation, solve_variation

SCHEMA = 1
COMMANDS = ("solve", "simulate", "variation", "lln", "clt", "covariance", "selfcheck")


ConfigError = hz.ConfigError


# ------------------------------------------------------------- config


def load_config(path: Path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    if cfg.get("schema") != SCHEMA:
        raise ConfigError(f"unsupported config schema {cfg.get('schema')!r} (expected {SCHEMA})")
    cfg["_base"] = str(Path(path).resolve().parent)
    return cfg


def _need(cfg, key):
    if key not in cfg:
        raise ConfigError(f"missing config field {key!r}")
    return cfg[key]


def _resolve(cfg, p) -> Path:
    p = Path(p)
    p = p if p.is_absolute() else Path(cfg["_base"]) / p
    if not p.exists():
        raise ConfigError(f"referenced file {p} does not exist")
    return p


def build_grid(cfg) -> Grid:
    g = _need(cfg, "grid")
    try:
        return Grid(float(g["delta"]), int(g["N"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad grid: {e}")


def build_kernel(cfg) -> KernelSpec:
    try:
        return KernelSpec.from_dict(_need(cfg, "kernel"))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad kernel: {e}")


def build_mu0(cfg, grid: Grid) -> GridMeasure:
    m = cfg.get("mu0", {"type": "monodisperse"})
    try:
        if m["type"] == "monodisperse":
            return GridMeasure.dirac(grid, float(m.get("mass", grid.delta)), float(m.get("weight", 1.0)))
        if m["type"] == "csv":
            return GridMeasure.from_csv(_resolve(cfg, m["path"]), grid)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad mu0: {e}")
    raise ConfigError(f"unknown mu0 type {m.get('type')!r}")


def _tabulated(path: Path, grid: Grid, name: str) -> GridFunction:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    vals = {}
    for r in rows:
        vals[grid.index_of(float(r["mass"]))] = float(r["value"])
    ext = np.zeros(2 * grid.nbins)
    if vals:
        idx = np.array(sorted(vals))
        ext[idx] = [vals[i] for i in idx]
    return GridFunction.from_ext(grid, ext, name=name)


def build_functionals(cfg, grid: Grid) -> dict:
    out = {}
    for name, d in cfg.get("functionals", {}).items():
        try:
            if "power" in d:
                f = GridFunction.power(grid, float(d["power"]))
            elif "indicator" in d:
                f = GridFunction.indicator(grid, float(d["indicator"]))
            elif d.get("energy"):
                f = energy_function(grid)
            elif "csv" in d:
                f = _tabulated(_resolve(cfg, d["csv"]), grid, name)
            else:
                raise ConfigError(f"functional {name!r}: expected power, indicator, energy or csv")
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad functional {name!r}: {e}")
        f.name = name
        out[name] = f
    return out


def _times(cfg):
    t = _need(cfg, "times")
    if not isinstance(t, list) or not t:
        raise ConfigError("times must be a non-empty list")
    return tuple(float(x) for x in t)


def _ladder(cfg):
    lad = [float(x) for x in _need(cfg, "ladder")]
    if len(lad) < 3 or len(set(lad)) != len(lad) or min(lad) <= 0:
        raise ConfigError("ladder values must be positive and distinct (at least 3)")
    return lad


def ensemble_config(cfg, h=None) -> hz.EnsembleConfig:
    grid = build_grid(cfg)
    prods = {k: tuple(v) for k, v in cfg.get("products", {}).items()}
    ec = hz.EnsembleConfig(
        spec=build_kernel(cfg), grid=grid,
        h=float(h if h is not None else cfg.get("h", _ladder(cfg)[0] if "ladder" in cfg else 0.01)),
        times=_times(cfg), functionals=build_functionals(cfg, grid), products=prods,
        R=int(cfg.get("R", 1000)), seed=int(cfg.get("seed", 0)), mu0=build_mu0(cfg, grid),
        dt=float(cfg.get("dt", 1e-3)), threads=int(cfg.get("threads", 1)))
    try:
        ec.validate()
    except hz.ConfigError as e:
        raise ConfigError(str(e))
    return ec


def effective_hash(command: str, cfg: dict, plot: bool = False) -> str:
    d = {k: v for k, v in cfg.items() if k not in ("_base", "out", "threads")}
    return hz.config_hash({"command": command, "config": d, "plot": bool(plot)})


# ------------------------------------------------------------ commands


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, hz.EnsembleStats):
        return o.to_dict()
    raise TypeError(type(o))


def _svg_loglog(path, series, xlabel, ylabel):
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, (x, y) in series.items():
        ax.loglog(x, y, "o-", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_solve(cfg, out: Path, args) -> int:
    grid = build_grid(cfg)
    spec = build_kernel(cfg)
    sol = solve_kinetic(build_mu0(cfg, grid), spec, _times(cfg), float(cfg.get("dt", 1e-3)))
    sol.to_csv(out / "solution.csv")
    meta = sol.metadata()
    _write_json(out / "metadata.json", meta)
    if args.plot:
        _svg_loglog(out / "moments.svg",
                    {f"M{k}": (sol.mesh[1:], sol.moments(k)[1:]) for k in (0, 2)}, "t", "moment")
    return 0


def cmd_simulate(cfg, out: Path, args) -> int:
    ec = ensemble_config(cfg)
    st = hz.run_ensemble(ec)
    _write_json(out / "ensemble.json", {"config_hash": hz.config_hash(ec.to_dict()), **st.to_dict()})
    with open(out / "means.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "functional", "mean", "stderr", "kinetic"])
        for i, t in enumerate(st.times):
            for j, lab in enumerate(st.labels):
                w.writerow([t, lab, repr(float(st.mean[i, j])), repr(float(st.stderr[i, j])),
                            repr(float(st.reference[i, j]))])
    if cfg.get("log_events"):
        init = ParticleState(ec.grid, ec.initial_counts(), ec.h)
        rng = hz.replica_rng(ec.seed, 0)
        _, log = simulate_path(init, ec.spec, list(ec.times), rng, log=True)
        log.to_csv(out / "events.csv")
    return 0


def cmd_variation(cfg, out: Path, args) -> int:
    grid = build_grid(cfg)
    spec = build_kernel(cfg)
    v = _need(cfg, "variation")
    times = _times(cfg)
    kin = solve_kinetic(build_mu0(cfg, grid), spec, times, float(cfg.get("dt", 1e-3)))
    try:
        x = float(v["x"])
        solve_variation(x, spec, kin).to_csv(out / "xi.csv")
        if "w" in v:
            solve_second_variation(x, float(v["w"]), spec, kin).to_csv(out / "eta.csv")
        if "g" in v:
            funcs = build_functionals(cfg, grid)
            solve_backward(funcs[v["g"]], float(v.get("r", times[-1])), spec, kin).to_csv(
                out / "propagator.csv")
    except KeyError as e:
        raise ConfigError(f"bad variation section: missing {e}")
    return 0


def _ladder_csv(path, rep):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["functional", "h", "error", "stderr"])
        for lab, f in rep["fits"].items():
            for h, e, s in zip(rep["ladder"], f["errors"], f["stderr"]):
                w.writerow([lab, h, repr(e), repr(s)])


def _rate_plot(path, rep, ylabel):
    series = {lab: (rep["ladder"], f["errors"]) for lab, f in rep["fits"].items() if not f["degenerate"]}
    if series:
        _svg_loglog(path, series, "h", ylabel)


def cmd_lln(cfg, out: Path, args) -> int:
    ec = ensemble_config(cfg)
    rep = hz.lln_rate(ec, _ladder(cfg), tuple(cfg.get("window", (0.8, 1.2))))
    _write_json(out / "report.json", rep)
    _ladder_csv(out / "ladder.csv", rep)
    if args.plot:
        _rate_plot(out / "lln.svg", rep, "sup |E(g,Z) - (g,mu)|")
    return 0 if rep["passed"] else 1


def cmd_clt(cfg, out: Path, args) -> int:
    ec = ensemble_config(cfg)
    reports = {}
    ok = True
    if "ladder" in cfg:
        rep = hz.clt_rate(ec, _ladder(cfg), tuple(cfg.get("window", (0.35, 0.65))))
        _ladder_csv(out / "ladder.csv", rep)
        if args.plot:
            _rate_plot(out / "clt.svg", rep, "sup |E(phi,F)|")
        reports["rate"] = rep
        ok &= rep["passed"]
    if "gaussianity" in cfg:
        g = cfg["gaussianity"]
        rep = hz.clt_gaussianity(hz._with(ec, h=float(g.get("h", ec.h))), g["phi"], float(g["t"]))
        reports["gaussianity"] = rep
        ok &= rep["passed"]
    if "second_moment" in cfg:
        s = cfg["second_moment"]
        rep = hz.second_moment_diagnostic(ec, float(s.get("k", 1.0)), [float(h) for h in s["ladder"]])
        reports["second_moment"] = rep
        ok &= rep["passed"]
    if not reports:
        raise ConfigError("clt needs at least one of ladder, gaussianity, second_moment")
    _write_json(out / "report.json", {"experiment": "clt", "reports": reports, "passed": bool(ok)})
    return 0 if ok else 1


def cmd_covariance(cfg, out: Path, args) -> int:
    ec = ensemble_config(cfg)
    c = _need(cfg, "covariance")
    times, phis = c.get("times"), c.get("functions")
    if not times or not phis or len(times) != len(phis):
        raise ConfigError("covariance needs matching times and functions lists")
    for p in phis:
        if p not in ec.functionals:
            raise ConfigError(f"unknown functional {p!r}")
    kin = hz.reference_kinetic(hz._with(ec, times=tuple(sorted(set(map(float, times))))))
    pred = ou_covariance([float(t) for t in times], [ec.functionals[p] for p in phis],
                         GridMeasure.zeros(ec.grid), ec.spec, kin)
    (out / "ou_covariance.json").write_text(pred.to_json() + "\n")
    rep = hz.finite_dim_cov_test(ec, times, phis)
    _write_json(out / "report.json", rep)
    return 0 if rep["passed"] else 1


def selfcheck() -> dict:
    """Exact identities on a small problem; every entry must be True."""
    grid = Grid(1.0, 24)
    E = energy_function(grid)
    res = {}
    for spec in (KernelSpec.constant_kernel(), KernelSpec.additive(1.0), KernelSpec.product_sqrt(0.5),
                 KernelSpec.smooth("saturating")):
        tag = spec.family if spec.smooth_name is None else spec.smooth_name
        mu0 = GridMeasure.dirac(grid, 1.0, 0.75) + GridMeasure.dirac(grid, 3.0, 0.25)
        sol = solve_kinetic(mu0, spec, [0.5], 1e-2, track={"E": E})
        res[f"kinetic_mass[{tag}]"] = bool(np.all(sol.tracked["E"] == sol.tracked["E"][0]))
        res[f"lambda_E[{tag}]"] = bool(np.all(apply_lambda(E, sol.at(0.5), spec).values == 0.0))
        phi = GridFunction.power(grid, 2)
        res[f"pi_E[{tag}]"] = pi_form(sol.at(0.5), E, phi, spec) == 0.0
        init = ParticleState.monodisperse(grid, 40, 0.025)
        rng = hz.replica_rng(0, 0)
        vals = run_replica(init, spec, [0.5, 2.0], E.ext[None, :], rng)
        res[f"particle_mass[{tag}]"] = bool(np.all(vals == 0.025 * 40))
    kin = solve_kinetic(GridMeasure.dirac(grid, 1.0), KernelSpec.constant_kernel(), [0.5], 1e-2)
    cov = ou_covariance([0.5], [GridFunction.indicator(grid, 1.0)], GridMeasure.zeros(grid),
                        KernelSpec.constant_kernel(), kin)
    res["char_fn_at_zero"] = char_fn(cov, np.zeros(1)) == 1.0
    return res


def cmd_selfcheck(cfg, out: Path, args) -> int:
    res = selfcheck()
    for k, v in res.items():
        print(f"{'ok  ' if v else 'FAIL'} {k}")
    if out is not None:
        _write_json(out / "report.json", {"experiment": "selfcheck", "checks": res, "passed": all(res.values())})
    return 0 if all(res.values()) else 1


HANDLERS = {
    "solve": cmd_solve, "simulate": cmd_simulate, "variation": cmd_variation, "lln": cmd_lln,
    "clt": cmd_clt, "covariance": cmd_covariance, "selfcheck": cmd_selfcheck,
}


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coagclt", description="Coagulation experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--replicas", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--plot", action="store_true", help="also write SVG plots")
    p.add_argument("--force", action="store_true", help="re-run even if results exist")
    p.add_argument("--out", type=Path)
    return p


def run_command(argv) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selfcheck" and args.config is None:
            cfg = None
        else:
            if args.config is None:
                raise ConfigError("--config is required")
            cfg = load_config(args.config)
            if args.seed is not None:
                if not 0 <= args.seed < 2**64:
                    raise ConfigError("seed must be an unsigned 64-bit integer")
                cfg["seed"] = args.seed
            if args.replicas is not None:
                cfg["R"] = args.replicas
            threads = args.threads if args.threads is not None else os.environ.get("SMOL_THREADS")
            if threads is not None:
                try:
                    cfg["threads"] = int(threads)
                except ValueError:
                    raise ConfigError(f"bad thread count {threads!r}")
            if args.command != "selfcheck":
                _dry_validate(args.command, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    if cfg is None:
        return cmd_selfcheck(None, None, args)

    root = Path(args.out or cfg.get("out", "runs"))
    dest = root / f"{args.command}-{effective_hash(args.command, cfg, args.plot)}"
    if (dest / "DONE").exists() and not args.force:
        print(f"{dest} is up to date (use --force to re-run)")
        return int((dest / "DONE").read_text().strip() or 0)
    root.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{args.command}-", dir=root))
    try:
        code = HANDLERS[args.command](cfg, tmp, args)
    except ConfigError as e:
        shutil.rmtree(tmp, ignore_errors=True)
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    cfg_out = {k: v for k, v in cfg.items() if k != "_base"}
    _write_json(tmp / "config.json", cfg_out)
    (tmp / "DONE").write_text(f"{code}\n")
    if dest.exists():
        shutil.rmtree(dest)
    tmp.rename(dest)
    print(dest)
    return code


def _dry_validate(command, cfg):
    """Parse everything the command will need before any file is written."""
    grid = build_grid(cfg)
    build_kernel(cfg)
    build_mu0(cfg, grid)
    build_functionals(cfg, grid)
    _times(cfg)
    if command in ("simulate", "lln", "clt", "covariance"):
        ensemble_config(cfg)
    if command == "lln":
        _ladder(cfg)
    if command == "clt" and "gaussianity" in cfg:
        g = cfg["gaussianity"]
        if g.get("phi") not in cfg.get("functionals", {}) or "t" not in g:
            raise ConfigError("gaussianity needs a known phi and a time t")
    if command == "variation":
        v = _need(cfg, "variation")
        if "x" not in v:
            raise ConfigError("variation needs a source mass x")
        if "g" in v and v["g"] not in cfg.get("functionals", {}):
            raise ConfigError(f"unknown functional {v['g']!r}")
    if int(cfg.get("R", 1)) < 1:
        raise ConfigError("R must be at least 1")
    if not math.isfinite(float(cfg.get("dt", 1e-3))) or float(cfg.get("dt", 1e-3)) <= 0:
        raise ConfigError("dt must be positive")


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
