"""Command-line experiment runner.

    latticelab --config configs/realize_gaussian.json --out out/realize

Every run is determined by the config file and the seed.  Each run writes
``manifest.json``, ``results.csv`` and ``raw.jsonl`` to the output directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import coupling as cpl
from . import discriminators as disc
from . import greedy, lattice, laws, paths, sweeps
from .errors import ConfigurationError, ReplicateError, ResourceError
from .rng import SiteRandomness, replicate_generator

COMMANDS = ("realize", "paths", "gla", "coupling", "psi", "discriminate", "sweep")
_REQUIRED = object()


# ---------------------------------------------------------------- validation helpers

def _get(block: dict, key: str, path: str, kind=None, default=_REQUIRED):
    if key not in block or block[key] is None:
        if default is _REQUIRED:
            raise ConfigurationError(f"{path}.{key}: required")
        return default
    val = block[key]
    if kind is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigurationError(f"{path}.{key}: expected an integer, got {val!r}")
    elif kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigurationError(f"{path}.{key}: expected a number, got {val!r}")
        val = float(val)
    elif kind is list:
        if not isinstance(val, list):
            raise ConfigurationError(f"{path}.{key}: expected a list")
    elif kind is dict:
        if not isinstance(val, dict):
            raise ConfigurationError(f"{path}.{key}: expected a mapping")
    elif kind is str:
        if not isinstance(val, str):
            raise ConfigurationError(f"{path}.{key}: expected a string")
    return val


def _law(cfg: dict) -> laws.PerturbationLaw:
    law, _ = laws.law_from_dict(_get(cfg, "law", "config", dict), "law")
    return law


def _stream(cfg: dict) -> int:
    return int(cfg.get("law", {}).get("stream", 0) or 0)


def _window(cfg: dict, d: int, law: laws.PerturbationLaw | None = None) -> lattice.Window:
    block = _get(cfg, "window", "config", dict)
    radius = _get(block, "radius", "window", int)
    if radius < 0:
        raise ConfigurationError("window.radius: must be non-negative")
    margin = _get(block, "margin", "window", int, None)
    if margin is not None:
        return lattice.Window(d, radius, margin)
    if law is None:
        return lattice.Window(d, radius, 0)
    budget = _get(block, "tail_budget", "window", float, lattice.TAIL_BUDGET)
    return lattice.Window.for_law(law, radius, budget)


def _process(block: dict | None, law: laws.PerturbationLaw | None, path: str) -> lattice.ProcessSpec:
    block = dict(block or {})
    if law is not None and "law" not in block and block.get("doubled") is None:
        block["law"] = law.to_dict()
    return lattice.ProcessSpec.from_dict(block, path)


def _schedule(block: dict, path: str) -> disc.ScheduleSpec:
    return disc.ScheduleSpec(
        n_sched=_get(block, "n_sched", path, int),
        kind=_get(block, "kind", path, str, "geometric"),
        m0=_get(block, "m0", path, float, 1.0),
    )


# ---------------------------------------------------------------- output

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def write_csv(path: Path, rows: list[dict]) -> None:
    cols: list = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])


def write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_jsonable(rec)) + "\n")


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "numba", "networkx"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    from . import __version__
    out["latticelab"] = __version__
    return out


# ---------------------------------------------------------------- commands

def cmd_realize(cfg: dict, seed: int, runner):
    law = _law(cfg)
    window = _window(cfg, law.dim, law)
    spec = _process(cfg.get("process"), law, "process")
    conf = lattice.realize(spec, window, SiteRandomness(seed, _stream(cfg)))
    blinded = bool(cfg.get("blinded", False))
    records = []
    for k in range(len(conf)):
        rec = {"coords": conf.points[k].tolist()}
        if not blinded:
            rec["site"] = conf.sites[k].tolist()
            rec["layer"] = int(conf.layers[k])
        records.append(rec)
    rows = [{"points": len(conf), "sites": window.site_count, "radius": window.radius, "margin": window.margin}]
    return rows, records


def cmd_paths(cfg: dict, seed: int, runner):
    block = _get(cfg, "paths", "config", dict)
    d = _get(block, "d", "paths", int)
    n = _get(block, "n", "paths", int)
    pairs = _get(block, "pairs", "paths", int)
    weights = tuple(_get(block, "step_weights", "paths", list, []))
    spec = paths.PathMeasureSpec(d, weights)
    gen = replicate_generator(seed, 0)
    curve = paths.eit_tail_estimate(spec, n, pairs, gen)
    summary = {"theta_hat": curve.theta_hat, "theta_lo": curve.theta_lo, "theta_hi": curve.theta_hi,
               "fit_available": curve.fit_available, "reason": curve.reason, "rho": None, "bounded_verdict": None}
    if cfg.get("law") is not None:
        law = _law(cfg)
        rep = paths.second_moment_estimate(law, spec, n, pairs, replicate_generator(seed, 1),
                                           mc_budget=_get(block, "mc_budget", "paths", int, 200_000))
        summary.update(rho=rep.rho, bounded_verdict=rep.bounded, second_moment=rep.as_dict())
    return curve.rows(), [summary]


def cmd_gla(cfg: dict, seed: int, runner):
    block = _get(cfg, "gla", "config", dict)
    law = _law(cfg)
    rep = greedy.growth_rate_estimate(law, _get(block, "n_grid", "gla", list), _get(block, "replicates", "gla", int),
                                      seed, _stream(cfg), runner)
    return rep.rows(), [rep.verdict_dict()]


def cmd_coupling(cfg: dict, seed: int, runner):
    block = _get(cfg, "coupling", "config", dict)
    d = _get(block, "d", "coupling", int)
    i_max = _get(block, "i_max", "coupling", int)
    runs = _get(block, "runs", "coupling", int)
    mode = _get(block, "floor_mode", "coupling", str, "certified")
    keep_sites = bool(block.get("record_sites", False))
    grid = _get(block, "alpha_grid", "coupling", list, None)
    alphas = grid if grid is not None else [_law(cfg).alpha_exponent]
    rows, records = [], []
    for a_idx, a in enumerate(alphas):
        law = laws.PerturbationLaw.power_tail(float(a), dim=d)
        ann = cpl.build_annuli(d, i_max, enumerate_sites=keep_sites)
        table = cpl.mixture_table(d, law, i_max, mode, ann)
        gen = replicate_generator(seed, a_idx)
        transcripts = [cpl.run_coupling(table, gen, ann if keep_sites else None) for _ in range(runs)]
        s = cpl.summarize_runs(table, transcripts)
        rows.append({"alpha": float(a), "d": d, "i_max": i_max, "success_rate": s.success_rate,
                     "ci_lo": s.ci_lo, "ci_hi": s.ci_hi})
        for k, t in enumerate(transcripts):
            rec = t.to_record()
            rec.update(alpha=float(a), run=k)
            records.append(rec)
    return rows, records


def cmd_psi(cfg: dict, seed: int, runner):
    block = _get(cfg, "psi", "config", dict)
    ms = [float(m) for m in _get(block, "m", "psi", list)]
    src = block.get("input")
    if src:
        src_path = Path(src)
        if not src_path.is_absolute() and cfg.get("_config_dir"):
            src_path = Path(cfg["_config_dir"]) / src_path
        conf = lattice.PointConfiguration.from_jsonl(src_path).blind()
    else:
        law = _law(cfg)
        window = _window(cfg, law.dim, law)
        spec = _process(cfg.get("process"), law, "process")
        conf = lattice.realize(spec, window, SiteRandomness(seed, _stream(cfg))).blind()
    vals = disc.psi_many(conf, ms)
    rows = [{"m": m, "psi": float(v)} for m, v in zip(ms, vals)]
    return rows, [{"points": len(conf), "m": ms, "psi": vals.tolist()}]


def _statistic(block: dict, window: lattice.Window, null: lattice.ProcessSpec, seed: int, replicates: int,
               runner, path: str) -> disc.Statistic:
    name = _get(block, "name", path, str)
    if name == "chain":
        return disc.chain_statistic(_get(block, "n_chain", path, int, 200), window.radius)
    if name == "psi_average":
        return disc.psi_average_statistic(_schedule(_get(block, "schedule", path, dict), f"{path}.schedule"))
    if name == "deleted_mass":
        sched = _schedule(_get(block, "schedule", path, dict), f"{path}.schedule")
        n_curve = _get(block, "curve_replicates", path, int, disc.NULL_CURVE_FACTOR * replicates)
        curve = disc.null_mean_curve(null, window, sched, n_curve, seed, runner)
        return disc.deleted_mass_statistic(curve, sched)
    if name == "pairing":
        radius = _get(block, "radius", path, float, None)
        if radius is None:
            if null.doubled is None:
                raise ConfigurationError(f"{path}.radius: required without a doubled process")
            radius = disc.pairing_radius(null.doubled.delta, window.d)
        return disc.pairing_statistic(radius)
    raise ConfigurationError(f"{path}.name: unknown statistic {name!r}")


def _null_and_window(cfg: dict):
    proc = cfg.get("process") or {}
    if proc.get("doubled") is not None:
        null = _process(proc, None, "process")
        d = _get(cfg.get("window", {}), "d", "window", int)
        law = laws.PerturbationLaw.gaussian(null.doubled.sigma, dim=d)
        return null, _window(cfg, d, law)
    law = _law(cfg)
    return _process(proc, law, "process"), _window(cfg, law.dim, law)


def cmd_discriminate(cfg: dict, seed: int, runner):
    block = _get(cfg, "discriminate", "config", dict)
    null, window = _null_and_window(cfg)
    replicates = _get(block, "replicates", "discriminate", int)
    alpha_level = _get(block, "alpha_level", "discriminate", float, 0.05)
    alt_block = dict(_get(block, "alt", "discriminate", dict))
    alt = _alt_from(null, alt_block)
    stat = _statistic(_get(block, "statistic", "discriminate", dict), window, null, seed, replicates, runner,
                      "discriminate.statistic")
    rep = disc.power_experiment(null, alt, stat, window, replicates, alpha_level, seed, runner)
    row = {"statistic": rep.statistic, "n": rep.n, "level": rep.level, "power": rep.power,
           "level_ci_lo": rep.ci["level"][0], "level_ci_hi": rep.ci["level"][1],
           "power_ci_lo": rep.ci["power"][0], "power_ci_hi": rep.ci["power"][1], "threshold": rep.threshold}
    return [row], [rep.to_json()]


def _alt_from(null: lattice.ProcessSpec, block: dict) -> lattice.ProcessSpec:
    """The alternative: the null with extra deletions and insertions from ``block``."""
    merged = null.to_dict()
    merged["deleted_sites"] = merged["deleted_sites"] + list(block.get("deleted_sites", []))
    merged["inserted_points"] = merged["inserted_points"] + list(block.get("inserted_points", []))
    return lattice.ProcessSpec.from_dict(merged, "discriminate.alt")


def cmd_sweep(cfg: dict, seed: int, runner, threads: int = 1):
    block = _get(cfg, "sweep", "config", dict)
    param = _get(block, "parameter", "sweep", str)
    grid = [float(v) for v in _get(block, "grid", "sweep", list)]
    replicates = _get(block, "replicates", "sweep", int)
    alpha_level = _get(block, "alpha_level", "sweep", float, 0.05)
    stat_block = _get(block, "statistic", "sweep", dict)
    alt_block = _get(block, "alt", "sweep", dict)
    base = _get(cfg, "law", "config", dict)
    cells = []
    for k, v in enumerate(grid):
        law_block = dict(base)
        if param not in ("sigma", "alpha", "alpha_exponent", "scale"):
            raise ConfigurationError(f"sweep.parameter: cannot sweep {param!r}")
        law_block[param] = v
        sub = dict(cfg, law=law_block)
        law = _law(sub)
        window = _window(sub, law.dim, law)
        null = _process(cfg.get("process"), law, "process")
        alt = _alt_from(null, alt_block)
        stat = _statistic(stat_block, window, null, seed, replicates, runner, "sweep.statistic")
        cells.append(sweeps.SweepCell(v, null, alt, stat, window))
    res = sweeps.phase_sweep(param, cells, replicates, alpha_level, seed, threads)
    records = [r.to_json() if r is not None else None for r in res.reports]
    records.append({"summary": res.summary, "self_test": res.self_test.to_json() if res.self_test else None})
    return res.rows, records


DISPATCH = {
    "realize": cmd_realize,
    "paths": cmd_paths,
    "gla": cmd_gla,
    "coupling": cmd_coupling,
    "psi": cmd_psi,
    "discriminate": cmd_discriminate,
}


def run(config: dict, out_dir, seed: int | None = None, threads: int = 1, command: str | None = None) -> int:
    """Run one experiment and write its artifacts; returns the exit status."""
    start = time.perf_counter()
    out = Path(out_dir)
    cfg = dict(config)
    command = command or cfg.get("command")
    if command not in COMMANDS:
        raise ConfigurationError(f"config.command: must be one of {COMMANDS}, got {command!r}")
    cfg["command"] = command
    if seed is not None:
        cfg["seed"] = int(seed)
    seed = _get(cfg, "seed", "config", int)
    if seed < 0 or seed >= 2**64:
        raise ConfigurationError("config.seed: must be an unsigned 64-bit integer")
    runner = sweeps.make_runner(threads)
    if command == "sweep":
        rows, records = cmd_sweep(cfg, seed, runner, threads)
    else:
        rows, records = DISPATCH[command](cfg, seed, runner)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "results.csv", rows)
    write_jsonl(out / "raw.jsonl", records)
    echo = {k: v for k, v in cfg.items() if not k.startswith("_")}
    manifest = {"config_echo": echo, "seed": seed, "versions": _versions(),
                "wall_time": time.perf_counter() - start}
    (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2) + "\n")
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="latticelab", description="Perturbed-lattice experiments.")
    ap.add_argument("--config", required=True, help="JSON experiment config")
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--command", choices=COMMANDS, default=None, help="overrides the config command")
    args = ap.parse_args(argv)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise ConfigurationError("config: expected a JSON object")
        cfg["_config_dir"] = str(Path(args.config).resolve().parent)
        return run(cfg, args.out, args.seed, args.threads, args.command)
    except (ConfigurationError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ReplicateError as exc:
        print(f"error in {exc.role} replicate {exc.index}: {exc.cause!r}", file=sys.stderr)
        return 3
    except ResourceError as exc:
        print(f"resource error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
