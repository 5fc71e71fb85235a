"""Statistics that separate a process from its deleted or modified versions, and power experiments."""
from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Callable, Sequence

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree

from .coupling import wilson_interval
from .errors import ConfigurationError, ReplicateError, UnsupportedDimensionError
from .greedy import chain_displacement_statistic
from .lattice import PointConfiguration, ProcessSpec, Window, realize
from .rng import SiteRandomness, replicate_seed

CALIBRATION, EVALUATION, ALTERNATIVE, NULL_CURVE = 0, 1, 2, 3
NULL_CURVE_FACTOR = 10


# ---------------------------------------------------------------- schedules and the kernel sum

@dataclass(frozen=True)
class ScheduleSpec:
    """Kernel widths ``m_l``: ``m0 * 2**l`` (geometric) or ``exp(2 l**2)`` for ``l >= 1`` (fast)."""

    n_sched: int
    kind: str = "geometric"
    m0: float = 1.0

    def __post_init__(self):
        if self.kind not in ("geometric", "fast"):
            raise ConfigurationError(f"schedule.kind: unknown schedule {self.kind!r}")
        if self.n_sched < 1 or self.m0 <= 0:
            raise ConfigurationError("schedule: need n_sched >= 1 and m0 > 0")

    def values(self) -> np.ndarray:
        ell = np.arange(self.n_sched, dtype=float)
        if self.kind == "geometric":
            return self.m0 * 2.0**ell
        return np.exp(2.0 * (ell + 1) ** 2)

    def effective(self, window_radius: float | None) -> tuple[np.ndarray, bool]:
        """Widths that fit the window, and whether any were dropped."""
        m = self.values()
        if window_radius is None:
            return m, False
        keep = m <= window_radius
        if not keep.any():
            raise ConfigurationError("no schedule width fits inside the window")
        return m[keep], bool((~keep).any())

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_sched": self.n_sched, "m0": self.m0}


def _require_blinded(config: PointConfiguration) -> None:
    if not config.blinded:
        raise ConfigurationError("discriminating statistics take blinded configurations")


def _abs_sorted(config: PointConfiguration) -> np.ndarray:
    if config.d != 1:
        raise UnsupportedDimensionError("the triangular kernel sum is defined for d = 1")
    return np.sort(np.abs(config.points[:, 0]))


def psi_many(config: PointConfiguration, ms) -> np.ndarray:
    """``(1/m) * sum_z max(m - |z|, 0)`` for each width ``m``."""
    _require_blinded(config)
    ms = np.atleast_1d(np.asarray(ms, dtype=float))
    if np.any(ms <= 0):
        raise ConfigurationError("kernel widths must be positive")
    z = _abs_sorted(config)
    csum = np.concatenate([[0.0], np.cumsum(z)])
    k = np.searchsorted(z, ms, side="left")
    return (ms * k - csum[k]) / ms


def psi(config: PointConfiguration, m: float) -> float:
    return float(psi_many(config, [m])[0])


def psi_schedule_average(config: PointConfiguration, schedule: ScheduleSpec,
                         window_radius: float | None = None) -> float:
    radius = window_radius if window_radius is not None else (config.window.radius if config.window else None)
    ms, _ = schedule.effective(radius)
    return float(psi_many(config, ms).mean())


# ---------------------------------------------------------------- replicate machinery

def _serial(fn, items):
    return [fn(x) for x in items]


def replicate_configs(spec: ProcessSpec, window: Window, seed: int, role: int):
    """Blinded configuration of replicate ``r`` for a role, as a function of ``r``."""
    def make(r: int) -> PointConfiguration:
        rng = SiteRandomness(replicate_seed(seed, role, r), 0)
        return realize(spec, window, rng).blind()
    return make


def _evaluate(spec, window, seed, role, replicates, statistic, runner, role_name):
    make = replicate_configs(spec, window, seed, role)

    def one(r):
        try:
            return float(statistic(make(r)))
        except Exception as exc:  # attach the replicate index for the caller
            raise ReplicateError(role_name, r, exc) from exc

    return np.array((runner or _serial)(one, range(replicates)), dtype=float)


@dataclass
class NullMeanCurve:
    ms: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    replicates: int


def null_mean_curve(null_spec: ProcessSpec, window: Window, schedule: ScheduleSpec, replicates: int,
                    seed: int, runner=None) -> NullMeanCurve:
    """Monte Carlo estimate of the expected kernel sum at each schedule width."""
    ms, _ = schedule.effective(window.radius)
    make = replicate_configs(null_spec, window, seed, NULL_CURVE)
    vals = np.array((runner or _serial)(lambda r: psi_many(make(r), ms), range(replicates)))
    return NullMeanCurve(ms, vals.mean(axis=0), vals.std(axis=0, ddof=1) / math.sqrt(replicates), replicates)


def deleted_mass_estimator(config: PointConfiguration, curve: NullMeanCurve, schedule: ScheduleSpec,
                           window_radius: float | None = None) -> float:
    """Average shortfall of the kernel sum against its null mean; about ``|S|`` for ``k`` deleted sites."""
    radius = window_radius if window_radius is not None else (config.window.radius if config.window else None)
    ms, _ = schedule.effective(radius)
    if ms.shape != curve.ms.shape or not np.allclose(ms, curve.ms):
        raise ConfigurationError("null mean curve was computed for a different schedule")
    return float((curve.mean - psi_many(config, ms)).mean())


# ---------------------------------------------------------------- sibling pairing

@dataclass
class PairingResult:
    unpaired_count: int
    n_pairs: int
    quantiles: dict
    interior_points: int


def pairing_radius(delta: float, d: int) -> float:
    return 6.0 * delta * math.sqrt(d)


SMALL_COMPONENT = 24


def _small_matching(g, nodes):
    """Maximum-cardinality, then maximum-weight matching by exhaustive search over a small graph."""
    pos = {v: k for k, v in enumerate(nodes)}
    adj = [[(pos[u], g[v][u]["weight"]) for u in g[v]] for v in nodes]
    full = (1 << len(nodes)) - 1

    @lru_cache(maxsize=None)
    def best(free):
        if not free:
            return 0, 0.0, ()
        k = (free & -free).bit_length() - 1
        rest = free & ~(1 << k)
        out = best(rest)
        for j, w in adj[k]:
            if rest >> j & 1:
                c, tot, pairs = best(rest & ~(1 << j))
                cand = (c + 1, tot + w, pairs + ((k, j),))
                if cand[:2] > out[:2]:
                    out = cand
        return out

    return {(nodes[a], nodes[b]) for a, b in best(full)[2]}


def _repair(pts, tree, partner, left, radius, hops):
    """Re-match the neighbourhood of unpaired points with a maximum-cardinality matching.

    The neighbourhood grows from the unpaired points through ``radius``
    neighbours and current partners for ``hops`` rounds, so short augmenting
    paths through greedy pairs are found.
    """
    region = set(int(v) for v in left)
    frontier = set(region)
    for _ in range(hops):
        grow = set()
        for nb_list in tree.query_ball_point(pts[sorted(frontier)], radius):
            grow.update(nb_list)
        grow.update(int(partner[v]) for v in list(grow | frontier) if partner[v] >= 0)
        frontier = grow - region
        region |= grow
        if not frontier:
            break
    region.update(int(partner[v]) for v in list(region) if partner[v] >= 0)
    nodes = np.array(sorted(region))
    g = nx.Graph()
    g.add_nodes_from(nodes.tolist())
    sub = cKDTree(pts[nodes])
    for a, b in sub.query_pairs(radius):
        u, v = int(nodes[a]), int(nodes[b])
        g.add_edge(u, v, weight=2.0 * radius - float(np.linalg.norm(pts[u] - pts[v])))
    for comp in nx.connected_components(g):
        if not any(partner[v] < 0 for v in comp):
            continue
        sub = g.subgraph(comp)
        # exhaustive search only pays off on small, sparse components
        if len(comp) <= SMALL_COMPONENT and sub.number_of_edges() <= 2 * len(comp):
            matched = _small_matching(g, sorted(comp))
        else:
            matched = nx.max_weight_matching(sub, maxcardinality=True)
        if 2 * len(matched) <= sum(1 for v in comp if partner[v] >= 0):
            continue
        for v in comp:
            partner[v] = -1
        for u, v in matched:
            partner[u], partner[v] = v, u


def sibling_pairing_stat(config: PointConfiguration, radius: float, interior: float | None = None,
                         hops: int = 3) -> PairingResult:
    """Pair points with their likely siblings and count the interior points left over.

    Mutual nearest neighbours within ``radius`` are paired first.  Around the
    points still unpaired, a maximum-cardinality, minimum-length matching of
    the ``radius`` graph replaces the greedy pairs.  Only points inside the
    box of half-width ``interior`` (default: window half-width minus three
    radii) are counted.
    """
    _require_blinded(config)
    pts = np.asarray(config.points)
    n = len(pts)
    if interior is None:
        if config.window is None:
            raise ConfigurationError("interior half-width needed for a configuration without a window")
        interior = config.window.half_width - 3.0 * radius
    if n < 2:
        return PairingResult(int(np.sum(np.all(np.abs(pts) <= interior, axis=1))), 0, {}, n)
    tree = cKDTree(pts)
    dist, idx = tree.query(pts, k=2)
    nn, nd = idx[:, 1], dist[:, 1]
    partner = -np.ones(n, dtype=np.int64)
    mutual = (nn[nn] == np.arange(n)) & (nd <= radius)
    partner[mutual] = nn[mutual]
    # leftovers far outside the counted box cannot change the count
    near = np.all(np.abs(pts) <= interior + radius, axis=1)
    left = np.flatnonzero((partner < 0) & near)
    if left.size:
        _repair(pts, tree, partner, left, radius, hops)
    inside = np.all(np.abs(pts) <= interior, axis=1)
    unpaired = int(np.sum(inside & (partner < 0)))
    paired = np.flatnonzero(partner > np.arange(n))
    lengths = np.linalg.norm(pts[paired] - pts[partner[paired]], axis=1)
    q = {}
    if lengths.size:
        q = {k: float(v) for k, v in zip(("q50", "q90", "q99", "max"),
                                         np.quantile(lengths, [0.5, 0.9, 0.99, 1.0]))}
    return PairingResult(unpaired, int(paired.size), q, int(inside.sum()))


# ---------------------------------------------------------------- statistics

@dataclass
class Statistic:
    """A real statistic of a blinded configuration; ``alternative`` says which tail rejects."""

    name: str
    fn: Callable[[PointConfiguration], float]
    alternative: str = "greater"
    params: dict = field(default_factory=dict)

    def __call__(self, config: PointConfiguration) -> float:
        return float(self.fn(config))


def psi_average_statistic(schedule: ScheduleSpec, window_radius: float | None = None) -> Statistic:
    """Deletions lower the kernel sums, so small values reject."""
    return Statistic("psi_schedule_average", lambda c: psi_schedule_average(c, schedule, window_radius),
                     "less", {"schedule": schedule.to_dict()})


def deleted_mass_statistic(curve: NullMeanCurve, schedule: ScheduleSpec) -> Statistic:
    return Statistic("deleted_mass", lambda c: deleted_mass_estimator(c, curve, schedule), "greater",
                     {"schedule": schedule.to_dict()})


def chain_statistic(n_chain: int, radius: int | None = None) -> Statistic:
    return Statistic("chain_displacement", lambda c: chain_displacement_statistic(c, n_chain, radius).value,
                     "greater", {"n_chain": n_chain})


def pairing_statistic(radius: float, interior: float | None = None) -> Statistic:
    return Statistic("sibling_pairing", lambda c: sibling_pairing_stat(c, radius, interior).unpaired_count,
                     "greater", {"radius": radius})


# ---------------------------------------------------------------- power

@dataclass
class TestReport:
    statistic: str
    null: dict
    alt: dict
    n: int
    level: float
    power: float
    ci: dict
    alpha_level: float
    threshold: float
    null_values: np.ndarray = field(repr=False, default=None)
    alt_values: np.ndarray = field(repr=False, default=None)

    __test__ = False  # not a pytest class

    def to_json(self) -> dict:
        return {"statistic": self.statistic, "null": self.null, "alt": self.alt, "n": self.n,
                "level": self.level, "power": self.power, "ci": self.ci}


def empirical_threshold(values: np.ndarray, alpha_level: float, alternative: str) -> float:
    """Cut-off with at most ``alpha_level`` of the calibration sample strictly beyond it."""
    v = np.sort(np.asarray(values, dtype=float))
    n = v.size
    if alternative == "greater":
        k = int(math.ceil((1.0 - alpha_level) * n)) - 1
        return float(v[min(max(k, 0), n - 1)])
    k = int(math.floor(alpha_level * n))
    return float(v[min(max(k, 0), n - 1)])


def rejects(values: np.ndarray, threshold: float, alternative: str) -> np.ndarray:
    # strict inequalities: ties with the threshold never reject
    return values > threshold if alternative == "greater" else values < threshold


def power_experiments(null_spec: ProcessSpec, alt_specs: Sequence[ProcessSpec], statistic: Statistic,
                      window: Window, replicates: int, alpha_level: float, seed: int, runner=None,
                      calibration_replicates: int | None = None) -> list[TestReport]:
    """Several alternatives against one null, sharing the calibration and null replicates.

    Alternative ``k`` draws its replicates from its own seed role, and the
    first alternative reproduces ``power_experiment`` exactly.
    """
    if not 0 < alpha_level < 1:
        raise ConfigurationError("alpha_level must lie in (0, 1)")
    if replicates < 2:
        raise ConfigurationError("need at least two replicates")
    n_cal = calibration_replicates or replicates
    cal = _evaluate(null_spec, window, seed, CALIBRATION, n_cal, statistic, runner, "calibration")
    threshold = empirical_threshold(cal, alpha_level, statistic.alternative)
    null_vals = _evaluate(null_spec, window, seed, EVALUATION, replicates, statistic, runner, "null")
    k_null = int(rejects(null_vals, threshold, statistic.alternative).sum())
    reports = []
    for k, alt_spec in enumerate(alt_specs):
        role = ALTERNATIVE if k == 0 else 100 + k
        alt_vals = _evaluate(alt_spec, window, seed, role, replicates, statistic, runner, f"alternative {k}")
        k_alt = int(rejects(alt_vals, threshold, statistic.alternative).sum())
        reports.append(TestReport(
            statistic=statistic.name,
            null=null_spec.to_dict(),
            alt=alt_spec.to_dict(),
            n=replicates,
            level=k_null / replicates,
            power=k_alt / replicates,
            ci={"level": list(wilson_interval(k_null, replicates)),
                "power": list(wilson_interval(k_alt, replicates))},
            alpha_level=alpha_level,
            threshold=threshold,
            null_values=null_vals,
            alt_values=alt_vals,
        ))
    return reports


def power_experiment(null_spec: ProcessSpec, alt_spec: ProcessSpec, statistic: Statistic, window: Window,
                     replicates: int, alpha_level: float, seed: int, runner=None,
                     calibration_replicates: int | None = None) -> TestReport:
    """Calibrate a one-sided threshold on null replicates, then measure level and power on fresh ones."""
    return power_experiments(null_spec, [alt_spec], statistic, window, replicates, alpha_level, seed, runner,
                             calibration_replicates)[0]
