"""Worker pools and parameter sweeps of power experiments."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .discriminators import Statistic, TestReport, power_experiment
from .errors import ConfigurationError
from .lattice import ProcessSpec, Window
from .rng import replicate_seed

MIN_CELL_REPLICATES = 100


def make_runner(threads: int):
    """``runner(fn, items) -> list`` in input order, whatever the thread count."""
    if threads <= 1:
        return lambda fn, items: [fn(x) for x in items]

    def run(fn, items):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, list(items)))

    return run


@dataclass
class SweepCell:
    """Everything needed to run one power experiment of a sweep."""

    parameter: float
    null: ProcessSpec
    alt: ProcessSpec
    statistic: Statistic
    window: Window


@dataclass
class SweepResult:
    parameter_name: str
    rows: list
    reports: list
    self_test: TestReport | None
    summary: dict = field(default_factory=dict)


def _summary(params, powers, alpha_level) -> dict:
    params = np.asarray(params, dtype=float)
    powers = np.asarray(powers, dtype=float)
    high = params[powers >= 0.9]
    low = params[powers <= 2 * alpha_level]
    crossing = None
    for k in range(len(params) - 1):
        a, b = powers[k], powers[k + 1]
        if (a - 0.5) * (b - 0.5) <= 0 and a != b:
            crossing = float(params[k] + (0.5 - a) * (params[k + 1] - params[k]) / (b - a))
            break
    return {
        "largest_with_power_ge_0.9": float(high.max()) if high.size else None,
        "smallest_with_power_le_2alpha": float(low.min()) if low.size else None,
        "half_power_crossing": crossing,
    }


def phase_sweep(parameter_name: str, cells: Sequence[SweepCell], replicates: int, alpha_level: float,
                seed: int, threads: int = 1, self_test: bool = True) -> SweepResult:
    """Run the cells in order; one extra cell with the alternative equal to the null checks the level."""
    if not cells:
        raise ConfigurationError("sweep grid is empty")
    if replicates < MIN_CELL_REPLICATES:
        raise ConfigurationError(f"sweeps need at least {MIN_CELL_REPLICATES} replicates per cell")
    runner = make_runner(threads)
    rows, reports = [], []
    for k, cell in enumerate(cells):
        # the first cell uses the sweep seed itself, so a one-cell sweep is a plain power experiment
        cell_seed = seed if k == 0 else replicate_seed(seed, 1000 + k)
        row = {"parameter": cell.parameter, "statistic": cell.statistic.name, "window": cell.window.radius}
        try:
            rep = power_experiment(cell.null, cell.alt, cell.statistic, cell.window, replicates, alpha_level,
                                   cell_seed, runner)
        except Exception as exc:
            reports.append(None)
            rows.append({**row, "power": math.nan, "ci_lo": math.nan, "ci_hi": math.nan, "error": repr(exc)})
            continue
        reports.append(rep)
        lo, hi = rep.ci["power"]
        rows.append({**row, "power": rep.power, "ci_lo": lo, "ci_hi": hi})
    st = None
    if self_test:
        c = cells[0]
        st = power_experiment(c.null, c.null, c.statistic, c.window, replicates, alpha_level,
                              replicate_seed(seed, 999), runner)
    result = SweepResult(parameter_name, rows, reports, st,
                         _summary([r["parameter"] for r in rows], [r["power"] for r in rows], alpha_level))
    return result


def non_increasing_within_ci(rows: list) -> bool:
    """No significant increase between neighbouring cells: each interval reaches down to the one before it."""
    return all(rows[k + 1]["ci_lo"] <= rows[k]["ci_hi"] for k in range(len(rows) - 1))
