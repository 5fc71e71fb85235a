"""Greedy lattice paths and the chain displacement statistic."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError
from .lattice import PointConfiguration, Window
from .laws import PerturbationLaw, sample_sites
from .matching import sparse_assignment
from .paths import OrientedPath
from .rng import SiteRandomness, replicate_seed


@dataclass(frozen=True, eq=False)
class WeightField:
    """Non-negative site weights on the box ``[-radius, radius]^d``."""

    values: np.ndarray
    radius: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        side = 2 * self.radius + 1
        if v.ndim < 1 or any(s != side for s in v.shape):
            raise ConfigurationError("weights must have side 2 * radius + 1 in every dimension")
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.ndim

    @classmethod
    def from_law(cls, law: PerturbationLaw, radius: int, rng: SiteRandomness) -> "WeightField":
        """Weights ``|Y_x|_1`` for the law's perturbations."""
        w = Window(law.dim, radius)
        y = sample_sites(law, w.sites(), rng)
        return cls(np.abs(y).sum(axis=1).reshape((2 * radius + 1,) * law.dim), radius)

    def scaled(self, factor: float) -> "WeightField":
        return WeightField(self.values * factor, self.radius)

    def at(self, sites) -> np.ndarray:
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64)) + self.radius
        return self.values[tuple(sites.T)]

    def orthant(self, n: int) -> np.ndarray:
        if n > self.radius:
            raise ConfigurationError(f"path length {n} exceeds the field radius {self.radius}")
        sl = tuple(slice(self.radius, self.radius + n + 1) for _ in range(self.d))
        return np.ascontiguousarray(self.values[sl])


@dataclass
class PathValueReport:
    n: int
    value: float
    per_step: float
    path_mode: str
    witness: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {"n": self.n, "value": self.value, "per_step": self.per_step, "path_mode": self.path_mode}


# ---------------------------------------------------------------- oriented DP

@nb.njit(cache=True, nogil=True)
def _backward(w, d, side, n):
    size = w.size
    strides = np.empty(d, dtype=np.int64)
    s = 1
    for i in range(d - 1, -1, -1):
        strides[i] = s
        s *= side
    best = np.full(size, -np.inf)
    choice = np.full(size, -1, dtype=np.int8)
    for idx in range(size - 1, -1, -1):
        rem = idx
        tot = 0
        for i in range(d):
            tot += rem // strides[i]
            rem = rem % strides[i]
        if tot > n:
            continue
        if tot == n:
            best[idx] = w[idx]
            continue
        b = -np.inf
        arg = -1
        for i in range(d):
            v = best[idx + strides[i]]
            if v > b:
                b = v
                arg = i
        best[idx] = w[idx] + b
        choice[idx] = arg
    return best, choice, strides


@nb.njit(cache=True, nogil=True)
def _forward(w, d, side, n):
    size = w.size
    strides = np.empty(d, dtype=np.int64)
    s = 1
    for i in range(d - 1, -1, -1):
        strides[i] = s
        s *= side
    f = np.full(size, -np.inf)
    level_max = np.full(n + 1, -np.inf)
    coords = np.empty(d, dtype=np.int64)
    for idx in range(size):
        rem = idx
        tot = 0
        for i in range(d):
            coords[i] = rem // strides[i]
            rem = rem % strides[i]
            tot += coords[i]
        if tot > n:
            continue
        b = 0.0
        if tot > 0:
            b = -np.inf
            for i in range(d):
                if coords[i] > 0:
                    v = f[idx - strides[i]]
                    if v > b:
                        b = v
        f[idx] = w[idx] + b
        if f[idx] > level_max[tot]:
            level_max[tot] = f[idx]
    return level_max


def max_oriented_path_sum(field: WeightField, n: int) -> PathValueReport:
    """Largest weight sum over oriented paths of ``n`` steps from the origin.

    The sum counts all ``n + 1`` visited sites; ties go to the lowest step index.
    """
    if n < 0:
        raise ConfigurationError("n must be non-negative")
    w = field.orthant(n).reshape(-1)
    best, choice, strides = _backward(w, field.d, n + 1, n)
    steps = np.empty(n, dtype=np.int64)
    idx = 0
    for k in range(n):
        steps[k] = choice[idx]
        idx += strides[steps[k]]
    value = float(best[0])
    return PathValueReport(n, value, value / n if n else value, "oriented_exact", OrientedPath(steps, field.d).sites)


def oriented_maxima(field: WeightField, n: int) -> np.ndarray:
    """``M_k`` for ``k = 0..n`` in one forward pass."""
    w = field.orthant(n).reshape(-1)
    return _forward(w, field.d, n + 1, n)


# ---------------------------------------------------------------- nearest-neighbour heuristic

def _moves(d: int) -> list[tuple]:
    eye = np.eye(d, dtype=np.int64)
    return [tuple(int(v) for v in row) for row in np.concatenate([eye, -eye])]


def _add(a: tuple, b: tuple) -> tuple:
    return tuple(x + y for x, y in zip(a, b))


def _segments(d: int, length: int) -> list[tuple]:
    """Every walk of ``length`` moves, as offsets from its start."""
    moves = _moves(d)
    out = []
    for combo in itertools.product(moves, repeat=length):
        pos = tuple([0] * d)
        seg = []
        for m in combo:
            pos = _add(pos, m)
            seg.append(pos)
        out.append(tuple(seg))
    return out


class _Walks:
    def __init__(self, field: WeightField):
        self.field = field
        self.r = field.radius
        self.moves = _moves(field.d)

    def weight(self, site: tuple) -> float:
        return float(self.field.values[tuple(c + self.r for c in site)])

    def inside(self, site: tuple) -> bool:
        return all(abs(c) <= self.r for c in site)

    def value(self, walk: list) -> float:
        return sum(self.weight(s) for s in set(walk))

    def greedy(self, n: int, gen: np.random.Generator, temperature: float) -> list:
        walk = [tuple([0] * self.field.d)]
        seen = set(walk)
        for _ in range(n):
            cand = [_add(walk[-1], m) for m in self.moves]
            gain = np.array([(0.0 if c in seen else self.weight(c)) if self.inside(c) else -np.inf for c in cand])
            if temperature > 0:
                finite = np.isfinite(gain)
                logits = np.where(finite, (gain - gain[finite].max()) / temperature, -np.inf)
                p = np.exp(logits)
                k = int(gen.choice(len(cand), p=p / p.sum()))
            else:
                k = int(np.argmax(gain))
            walk.append(cand[k])
            seen.add(cand[k])
        return walk

    def improve(self, walk: list, segs: dict) -> list:
        """Re-route inner segments between fixed endpoints and re-grow the tail until no gain."""
        best = self.value(walk)
        n = len(walk) - 1
        improved = True
        while improved:
            improved = False
            for length in sorted(segs):
                if length > n:
                    continue
                for start in range(n - length + 1):
                    end = start + length
                    origin = walk[start]
                    if end < n:
                        offset = tuple(t - o for t, o in zip(walk[end], origin))
                        pool = segs[length].get(offset, ())
                    else:
                        pool = [seg for group in segs[length].values() for seg in group]
                    for seg in pool:
                        new = [_add(origin, o) for o in seg]
                        if not all(self.inside(c) for c in new):
                            continue
                        cand = walk[: start + 1] + new + walk[end + 1 :]
                        val = self.value(cand)
                        if val > best + 1e-12:
                            walk, best, improved = cand, val, True
                            break
        return walk


def nn_path_sum_heuristic(field: WeightField, n: int, restarts: int = 20,
                          gen: np.random.Generator | None = None, segment: int = 4) -> PathValueReport:
    """Lower bound for the best nearest-neighbour walk of ``n`` steps.

    Sites visited more than once count once.  The search starts from the
    optimal oriented path, so the result is never below the oriented value.
    """
    if n > field.radius:
        raise ConfigurationError(f"path length {n} exceeds the field radius {field.radius}")
    gen = gen if gen is not None else np.random.default_rng(0)
    walks = _Walks(field)
    segs = {}
    for L in range(2, segment + 1):
        by_end: dict = {}
        for seg in _segments(field.d, L):
            by_end.setdefault(seg[-1], []).append(seg)
        segs[L] = by_end
    start = [tuple(int(c) for c in s) for s in max_oriented_path_sum(field, n).witness]
    candidates = [start, walks.greedy(n, gen, 0.0)]
    scale = float(field.values.std()) or 1.0
    for _ in range(max(restarts - 2, 0)):
        candidates.append(walks.greedy(n, gen, scale))
    best_walk, best = None, -np.inf
    for walk in candidates:
        walk = walks.improve(walk, segs)
        val = walks.value(walk)
        if val > best:
            best_walk, best = walk, val
    return PathValueReport(n, best, best / n if n else best, "nn_heuristic", np.array(best_walk))


# ---------------------------------------------------------------- growth rate

@dataclass
class GrowthReport:
    n_grid: list
    mean: np.ndarray
    se: np.ndarray
    replicates: int
    m_hat: float
    slope_b: float
    fit_r2: float
    threshold_epsilon: float
    verdict: str | None
    flags: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [{"n": int(n), "mean": float(m), "se": float(s), "replicates": self.replicates}
                for n, m, s in zip(self.n_grid, self.mean, self.se)]

    def verdict_dict(self) -> dict:
        return {"m_hat": self.m_hat, "fit_r2": self.fit_r2, "threshold_epsilon": self.threshold_epsilon,
                "verdict": self.verdict, "flags": list(self.flags)}


def growth_per_step(law: PerturbationLaw, n_grid, rng: SiteRandomness) -> np.ndarray:
    """``M_n / n`` of one field for each ``n`` in the grid."""
    n_max = int(max(n_grid))
    d = law.dim
    r = np.arange(n_max + 1)
    grids = np.meshgrid(*([r] * d), indexing="ij")
    sites = np.stack([g.reshape(-1) for g in grids], axis=1)
    keep = sites.sum(axis=1) <= n_max
    w = np.zeros(len(sites))
    w[keep] = np.abs(sample_sites(law, sites[keep], rng)).sum(axis=1)
    level = _forward(w, d, n_max + 1, n_max)
    return np.array([level[n] / n for n in n_grid])


def growth_rate_estimate(law: PerturbationLaw, n_grid, replicates: int, seed: int, stream: int = 0,
                         runner=None) -> GrowthReport:
    """Extrapolate ``E[M_n] / n`` to ``n -> infinity`` with the model ``a + b / n``."""
    n_grid = sorted(int(n) for n in n_grid)
    if len(n_grid) < 3 or n_grid[0] < 1:
        raise ConfigurationError("n_grid needs at least three positive lengths")
    if replicates < 2:
        raise ConfigurationError("need at least two replicates")

    def one(r):
        return growth_per_step(law, n_grid, SiteRandomness(replicate_seed(seed, r), stream))

    vals = np.array(runner(one, range(replicates)) if runner else [one(r) for r in range(replicates)])
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(replicates)
    x = 1.0 / np.array(n_grid, dtype=float)
    b, a = np.polyfit(x, mean, 1)
    resid = mean - (a + b * x)
    ss_tot = float(((mean - mean.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    flags = []
    step = np.diff(mean)
    noise = 3 * np.hypot(se[1:], se[:-1])
    if np.any(step > noise) and np.any(step < -noise):
        flags.append("per-step means are not monotone in n")
    if np.any(np.abs(resid) > 4 * se + 1e-9 * abs(a)):
        flags.append("a + b/n does not fit within 4 standard errors")
    verdict = None
    if not flags and a > 0:
        verdict = "< 1/2" if a < 0.5 else ">= 1/2"
    eps = 0.5 / a if a > 0 else math.inf
    return GrowthReport(n_grid, mean, se, replicates, float(a), float(b), r2, eps, verdict, flags)


# ---------------------------------------------------------------- chain statistic

@dataclass
class ChainResult:
    value: float
    steps: int
    path_length: int
    truncated: bool
    reason: str
    feasible: bool
    unmatched_sites: int = 0


def _box_sites(d: int, radius: int) -> np.ndarray:
    return Window(d, radius).sites()


@nb.njit(cache=True, nogil=True)
def _cell_edges(points, radius, offsets):
    """Edges from each box site to the points whose nearest site is ``site + offset``."""
    n, d = points.shape
    side = 2 * radius + 1
    n_cells = side**d
    cell = np.empty(n, dtype=np.int64)
    for p in range(n):
        code = 0
        for k in range(d):
            c = int(np.rint(points[p, k]))
            c = min(max(c, -radius), radius)
            code = code * side + c + radius
        cell[p] = code
    start = np.zeros(n_cells + 1, dtype=np.int64)
    for p in range(n):
        start[cell[p] + 1] += 1
    for c in range(n_cells):
        start[c + 1] += start[c]
    fill = start[:-1].copy()
    items = np.empty(n, dtype=np.int64)
    for p in range(n):
        items[fill[cell[p]]] = p
        fill[cell[p]] += 1
    site = np.empty(d, dtype=np.int64)
    counts = np.zeros(n_cells, dtype=np.int64)
    for pass_no in range(2):
        if pass_no == 1:
            indptr = np.zeros(n_cells + 1, dtype=np.int64)
            for s in range(n_cells):
                indptr[s + 1] = indptr[s] + counts[s]
            indices = np.empty(indptr[-1], dtype=np.int64)
            costs = np.empty(indptr[-1])
        for s in range(n_cells):
            rem = s
            for k in range(d - 1, -1, -1):
                site[k] = rem % side - radius
                rem //= side
            e = 0
            for o in range(offsets.shape[0]):
                code = 0
                inside = True
                for k in range(d):
                    c = site[k] + offsets[o, k]
                    if c < -radius or c > radius:
                        inside = False
                        break
                    code = code * side + c + radius
                if not inside:
                    continue
                for t in range(start[code], start[code + 1]):
                    if pass_no == 1:
                        p = items[t]
                        cost = 0.0
                        for k in range(d):
                            cost += abs(points[p, k] - site[k])
                        indices[indptr[s] + e] = p
                        costs[indptr[s] + e] = cost
                    e += 1
            if pass_no == 0:
                counts[s] = e
    return indptr, indices, costs


def _l1_offsets(d: int, reach: int) -> np.ndarray:
    r = np.arange(-reach, reach + 1)
    grid = np.stack([g.reshape(-1) for g in np.meshgrid(*([r] * d), indexing="ij")], axis=1)
    return np.ascontiguousarray(grid[np.abs(grid).sum(axis=1) <= reach], dtype=np.int64)


def _with_dummies(indptr, indices, costs, shell, n_pts, boundary_cost):
    n_sites = indptr.size - 1
    extra = np.zeros(n_sites, dtype=np.int64)
    extra[shell] = 1
    counts = np.diff(indptr) + extra
    new_ptr = np.concatenate([[0], np.cumsum(counts)])
    new_idx = np.empty(new_ptr[-1], dtype=np.int64)
    new_cost = np.empty(new_ptr[-1])
    pos = np.repeat(new_ptr[:-1] - indptr[:-1], np.diff(indptr)) + np.arange(indptr[-1])
    new_idx[pos] = indices
    new_cost[pos] = costs
    last = new_ptr[1:][shell] - 1
    new_idx[last] = n_pts + np.arange(len(shell))
    new_cost[last] = boundary_cost
    return new_ptr, new_idx, new_cost


def _knn_edges(pts, sites, k):
    kk = min(k, len(pts))
    dist, idx = cKDTree(pts).query(sites, k=kk, p=1)
    dist = dist.reshape(len(sites), kk)
    idx = idx.reshape(len(sites), kk)
    return np.arange(len(sites) + 1) * kk, idx.reshape(-1), dist.reshape(-1), kk


def site_assignment(config: PointConfiguration, radius: int, k_neighbors: int | None = None,
                    boundary_cost: float = 0.5):
    """Minimum ``|.|_1`` cost matching of the sites of ``[-radius, radius]^d`` into the points.

    Sites on the outer shell may instead take a private dummy at
    ``boundary_cost``.  Candidate edges join a site to the points rounding to
    it or to a lattice neighbour; if that graph has no complete matching the
    candidates switch to the ``k`` nearest points, doubling ``k`` as needed.
    Returns ``(sites, site_to_point, unmatched)`` with -1 for dummies.
    """
    d = config.d
    sites = _box_sites(d, radius)
    pts = np.ascontiguousarray(config.points, dtype=np.float64)
    n_pts = len(pts)
    shell = np.flatnonzero(np.abs(sites).max(axis=1) == radius)
    failed = len(sites)
    match = -np.ones(len(sites), dtype=np.int64)
    if n_pts:
        ptr, idx, cost = _cell_edges(pts, radius, _l1_offsets(d, 1))
        ptr, idx, cost = _with_dummies(ptr, idx, cost, shell, n_pts, boundary_cost)
        match, failed = sparse_assignment(ptr, idx, cost, n_pts + len(shell))
        k = k_neighbors or 4 * d
        while failed:
            ptr, idx, cost, kk = _knn_edges(pts, sites, k)
            ptr, idx, cost = _with_dummies(ptr, idx, cost, shell, n_pts, boundary_cost)
            match, failed = sparse_assignment(ptr, idx, cost, n_pts + len(shell))
            if kk >= n_pts:
                break
            k *= 2
    match = np.where(match >= n_pts, -1, match)
    return sites, match, failed


def chain_displacement_statistic(config: PointConfiguration, n_chain: int, radius: int | None = None,
                                 k_neighbors: int | None = None, boundary_cost: float = 0.5) -> ChainResult:
    """Per-unit-length displacement along the chain ``v_{j+1} = W(psi(v_j))`` from the origin.

    ``psi`` is the optimal site-to-point matching and ``W`` sends a point to
    its nearest lattice site.  The sum of ``|psi(v_k) - v_k|_1`` is divided by
    the site-to-site length ``s_j`` of the chain (at least 1).
    """
    if not config.blinded:
        raise ConfigurationError("discriminating statistics take blinded configurations")
    if radius is None:
        if config.window is None:
            raise ConfigurationError("radius is required when the configuration carries no window")
        radius = config.window.radius
    d = config.d
    sites, match, failed = site_assignment(config, radius, k_neighbors, boundary_cost)
    side = 2 * radius + 1
    pts = np.asarray(config.points)

    def index_of(site):
        idx = 0
        for c in site:
            idx = idx * side + int(c) + radius
        return idx

    v = np.zeros(d, dtype=np.int64)
    visited = {tuple(v)}
    disp, length, steps = 0.0, 0, 0
    reason, truncated = "chain closed", False
    for _ in range(n_chain):
        p = match[index_of(v)]
        if p < 0:
            reason, truncated = "chain left through the boundary", True
            break
        disp += float(np.abs(pts[p] - v).sum())
        steps += 1
        nxt = np.rint(pts[p]).astype(np.int64)
        if np.abs(nxt).max() > radius:
            reason, truncated = "chain left the window", True
            break
        length += int(np.abs(nxt - v).sum())
        if tuple(nxt) in visited:
            break
        visited.add(tuple(nxt))
        v = nxt
    else:
        reason = "reached n_chain"
    return ChainResult(disp / max(length, 1), steps, length, truncated, reason, failed == 0, failed)
