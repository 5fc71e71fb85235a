"""Dyadic annuli, mixture decompositions and the binomial coupling that moves an extra point outward."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigurationError, ResourceError
from .laws import POWER_TAIL, STABLE, PerturbationLaw, density

ENUMERATION_BUDGET = 5_000_000
GRID_POINTS = 10_000


# ---------------------------------------------------------------- annuli

def _isqrt_floor(m: np.ndarray) -> np.ndarray:
    r = np.floor(np.sqrt(m.astype(np.float64))).astype(np.int64)
    r -= (r * r > m)
    r += ((r + 1) * (r + 1) <= m)
    return r


def ball_count(d: int, r2: int) -> int:
    """Number of integer points with squared Euclidean norm at most ``r2``."""
    if r2 < 0:
        return 0
    if d == 1:
        return 2 * math.isqrt(r2) + 1
    if d == 2:
        x = np.arange(-math.isqrt(r2), math.isqrt(r2) + 1, dtype=np.int64)
        return int((2 * _isqrt_floor(r2 - x * x) + 1).sum())
    top = math.isqrt(r2)
    return sum(ball_count(d - 1, r2 - x * x) for x in range(-top, top + 1))


def ball_volume(d: int, radius: float) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * radius**d


def annulus_index(sites) -> np.ndarray:
    """Index ``i >= 1`` of the dyadic annulus holding each nonzero site; 0 for the origin."""
    sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    r2 = (sites * sites).sum(axis=1)
    out = np.zeros(len(sites), dtype=np.int64)
    nz = r2 > 0
    # smallest i >= 1 with r2 <= 4**i
    i = np.maximum(1, np.ceil(np.log2(np.maximum(r2[nz], 1)) / 2).astype(np.int64))
    i -= (i > 1) & (r2[nz] <= 4 ** (i - 1))
    i += r2[nz] > 4**i
    out[nz] = i
    return out


@dataclass
class AnnulusDecomposition:
    """``H_1 = B_2`` minus the origin and ``H_i = B_{2^i} \\ B_{2^{i-1}}`` for ``i >= 2``."""

    d: int
    i_max: int
    counts: np.ndarray
    volumes: np.ndarray
    c1: float
    c2: float
    sites: list | None = None

    @property
    def indices(self) -> np.ndarray:
        return np.arange(1, self.i_max + 1)

    def union_volume(self, i: int) -> float:
        """Volume of ``H_i`` joined with ``H_{i+1}``."""
        if i == 1:
            return ball_volume(self.d, 4.0)
        return ball_volume(self.d, 2.0 ** (i + 1)) - ball_volume(self.d, 2.0 ** (i - 1))

    def mixing_ratio(self, i: int) -> float:
        """``r_i = |H_i| / |H_i u H_{i+1}|``."""
        return float(self.volumes[i - 1] / self.union_volume(i))


def build_annuli(d: int, i_max: int, enumerate_sites: bool = False) -> AnnulusDecomposition:
    """Dyadic annuli up to ``i_max + 1``; lattice counts are exact.

    The extra outer annulus is needed for the last mixing ratio.  Site lists
    are built only on request and within the enumeration budget.
    """
    if d < 1 or i_max < 1:
        raise ConfigurationError("need d >= 1 and i_max >= 1")
    top = i_max + 1
    balls = [ball_count(d, 4**i) for i in range(0, top + 1)]
    counts = np.array([balls[1] - 1] + [balls[i] - balls[i - 1] for i in range(2, top + 1)], dtype=np.int64)
    vols = np.array([ball_volume(d, 2.0)] + [ball_volume(d, 2.0**i) - ball_volume(d, 2.0 ** (i - 1))
                                             for i in range(2, top + 1)])
    scale = np.array([2.0 ** (i * d) for i in range(1, top + 1)])
    ratio = np.concatenate([counts / scale, vols / scale])
    sites = None
    if enumerate_sites:
        total = int(counts[:i_max].sum())
        if total > ENUMERATION_BUDGET:
            raise ResourceError(f"{total} sites exceed the enumeration budget {ENUMERATION_BUDGET}")
        r = np.arange(-(2**i_max), 2**i_max + 1, dtype=np.int64)
        grid = np.stack([g.reshape(-1) for g in np.meshgrid(*([r] * d), indexing="ij")], axis=1)
        idx = annulus_index(grid)
        sites = [grid[idx == i] for i in range(1, i_max + 1)]
    return AnnulusDecomposition(d, i_max, counts[:top], vols[:top], float(ratio.min()), float(ratio.max()), sites)


# ---------------------------------------------------------------- mixture table

def tail_exponent(law: PerturbationLaw) -> float:
    if law.kind == POWER_TAIL:
        return law.alpha_exponent
    if law.kind == STABLE and law.alpha < 2:
        return 1.0 + law.alpha
    raise ConfigurationError("the coupling needs a power-tail or heavy-tailed stable law")


@dataclass
class MixtureTable:
    """Per-annulus density floors and the mixture weights they certify."""

    d: int
    alpha: float
    i_max: int
    floors: np.ndarray
    p: np.ndarray
    r: np.ndarray
    counts: np.ndarray
    expected_z: np.ndarray
    c1: float
    c3: float
    c4: float
    c5: float
    mode: str
    capped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def tolerant_regime(self) -> bool:
        return self.alpha < 2 * self.d

    def z_threshold(self, i: int) -> float:
        return max(1.0, self.c5 * 2.0 ** (i * (2 * self.d - self.alpha)))

    def rows(self) -> list[dict]:
        return [
            {"i": i + 1, "floor": float(self.floors[i]), "p": float(self.p[i]), "r": float(self.r[i]),
             "count": int(self.counts[i]), "expected_z": float(self.expected_z[i])}
            for i in range(self.i_max)
        ]


def _grid_1d(i: int, n_points: int) -> np.ndarray:
    """Points of ``H_i u H_{i+1}`` on the line, refined near the annulus boundaries."""
    inner = 0.0 if i == 1 else 2.0 ** (i - 1)
    outer = 2.0 ** (i + 1)
    base = np.linspace(inner, outer, n_points // 2)
    edges = [inner, 2.0**i, outer]
    h = (outer - inner) / (n_points // 2)
    fine = np.concatenate([np.linspace(e - 2 * h, e + 2 * h, 17) for e in edges])
    y = np.concatenate([base, fine])
    y = y[(y >= inner) & (y <= outer)]
    return np.concatenate([-y, y])


def _grid_floor(law: PerturbationLaw, i: int, x_sites: np.ndarray, n_points: int) -> float:
    """Smallest density of ``y - x`` over a grid of ``y`` and the given sites ``x``."""
    d = law.dim
    if d == 1:
        y = _grid_1d(i, n_points)[:, None]
    else:
        radii = np.abs(_grid_1d(i, 2 * int(n_points ** (1 / d)) + 8))
        radii = np.unique(radii)
        gen = np.random.default_rng(i)
        dirs = gen.standard_normal((max(n_points // len(radii), 4), d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        # include the axis directions so extreme pairs along the axes are hit exactly
        dirs = np.vstack([dirs, np.eye(d), -np.eye(d)])
        y = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, d)
    best = math.inf
    for x in x_sites:
        best = min(best, float(np.min(density(law, y - x))))
    return best


def mixture_table(d: int, law: PerturbationLaw, i_max: int, mode: str = "certified",
                  annuli: AnnulusDecomposition | None = None, grid_points: int = GRID_POINTS) -> MixtureTable:
    """Largest density floor per annulus and the resulting weights ``p_i``.

    ``certified`` uses that a power-tail density decreases radially, so its
    minimum over a pair of annuli sits at the largest separation
    ``2^i + 2^{i+1}``.  ``grid`` minimizes numerically over lattice sites of
    ``H_i`` and a grid of ``y``.
    """
    if law.dim != d:
        raise ConfigurationError("law dimension does not match d")
    alpha = tail_exponent(law)
    ann = annuli or build_annuli(d, i_max)
    floors = np.empty(i_max)
    for i in range(1, i_max + 1):
        if mode == "certified":
            if law.kind != POWER_TAIL:
                raise ConfigurationError("certified floors need a power-tail law")
            far = np.zeros(d)
            far[0] = 2.0**i + 2.0 ** (i + 1)
            floors[i - 1] = float(density(law, far))
        elif mode == "grid":
            if d == 1:
                xs = np.concatenate([np.arange(-(2**i), -(2 ** (i - 1))), np.arange(2 ** (i - 1) + 1, 2**i + 1)])
                if i == 1:
                    xs = np.array([-2, -1, 1, 2])
                x_sites = xs[:, None].astype(float)
            else:
                x_sites = np.vstack([np.eye(d) * 2.0**i, -np.eye(d) * 2.0**i])
            floors[i - 1] = _grid_floor(law, i, x_sites, grid_points)
        else:
            raise ConfigurationError(f"unknown floor mode {mode!r}")
    union = np.array([ann.union_volume(i) for i in range(1, i_max + 1)])
    raw_p = floors * union
    capped = raw_p > 1.0
    p = np.minimum(raw_p, 1.0)
    r = np.array([ann.mixing_ratio(i) for i in range(1, i_max + 1)])
    scale = np.array([2.0 ** (alpha * i) for i in range(1, i_max + 1)])
    c3 = float(np.min(floors * scale))
    c4 = ann.c1 * c3
    c5 = ann.c1 * c4 / 2.0
    counts = ann.counts[:i_max].copy()
    return MixtureTable(d, alpha, i_max, floors, p, r, counts, counts * p, ann.c1, c3, c4, c5, mode, capped)


# ---------------------------------------------------------------- binomial shift

def _binom_pmf(n: int, p: float) -> np.ndarray:
    return stats.binom.pmf(np.arange(n + 1), n, p)


def _shift_tv(n: int, p: float) -> float:
    pmf = _binom_pmf(n, p)
    a = np.concatenate([pmf, [0.0]])
    b = np.concatenate([[0.0], pmf])
    return float(0.5 * np.abs(a - b).sum())


def _c8_local(n: int, p: float) -> float:
    """Largest relative step ``|p_j - p_{j-1}| / p_j`` near the mean, times ``(np)^{1/4}``."""
    mu = n * p
    half = mu**0.75
    lo = max(int(math.ceil(mu - half)), 1)
    hi = min(int(math.floor(mu + half)), n)
    if hi < lo:
        return math.nan
    j = np.arange(lo, hi + 1)
    ratio = np.abs(1.0 - np.exp(stats.binom.logpmf(j - 1, n, p) - stats.binom.logpmf(j, n, p)))
    return float(ratio.max() * mu**0.25)


@dataclass(frozen=True)
class ShiftTV:
    """Exact ``d_TV(B, B + 1)`` for ``B ~ Binomial(n, p)`` and the analytic bound."""

    n: int
    p: float
    tv: float
    bound: float
    c8: float


def shift_tv_bound(n: int, p: float, c8: float) -> float:
    mu = n * p
    return 2.0 * math.exp(-(mu**1.5) / n) + c8 * mu**-0.25


def binomial_shift_tv(n: int, p: float, c8: float | None = None) -> ShiftTV:
    if n < 0 or not (0.0 <= p <= 1.0):
        raise ConfigurationError("need n >= 0 and p in [0, 1]")
    if n == 0 or p in (0.0, 1.0):
        return ShiftTV(n, p, 1.0, math.inf, math.nan)
    tv = _shift_tv(n, p)
    if c8 is None:
        c8 = _c8_local(n, p)
    return ShiftTV(n, p, tv, shift_tv_bound(n, p, c8) if np.isfinite(c8) else math.inf, c8)


def fitted_c8(p: float, n_grid) -> float:
    """One ``c8`` valid for every ``n`` in the grid."""
    vals = [_c8_local(int(n), p) for n in n_grid]
    return float(np.nanmax(vals))


def bound_onset(p: float, n_grid, c8: float) -> int | None:
    """Smallest grid ``n`` from which the exact value stays below the bound."""
    n_grid = sorted(int(n) for n in n_grid)
    ok = [binomial_shift_tv(n, p).tv <= shift_tv_bound(n, p, c8) for n in n_grid]
    onset = None
    for n, good in zip(reversed(n_grid), reversed(ok)):
        if not good:
            break
        onset = n
    return onset


# ---------------------------------------------------------------- coupling

def maximal_coupling(pmf_a, pmf_b, gen: np.random.Generator) -> tuple[int, int]:
    """A draw ``(a, b)`` with the given marginals and ``P(a != b) = d_TV``.

    Both pmfs are indexed by value from 0.
    """
    pa = np.asarray(pmf_a, dtype=np.float64)
    pb = np.asarray(pmf_b, dtype=np.float64)
    if np.any(pa < 0) or np.any(pb < 0) or abs(pa.sum() - 1) > 1e-12 or abs(pb.sum() - 1) > 1e-12:
        raise ConfigurationError("inputs must be probability vectors summing to 1")
    size = max(pa.size, pb.size)
    pa = np.pad(pa, (0, size - pa.size))
    pb = np.pad(pb, (0, size - pb.size))
    overlap = np.minimum(pa, pb)
    w = overlap.sum()
    if gen.random() < w:
        j = _draw(overlap / w, gen)
        return j, j
    ra = np.maximum(pa - overlap, 0.0)
    rb = np.maximum(pb - overlap, 0.0)
    return _draw(ra / ra.sum(), gen), _draw(rb / rb.sum(), gen)


def _draw(pmf: np.ndarray, gen: np.random.Generator) -> int:
    c = np.cumsum(pmf)
    return int(min(np.searchsorted(c, gen.random() * c[-1], side="right"), pmf.size - 1))


def _pair_pmfs(z: int, r: float, first: bool):
    """Laws of ``W_i`` and of the comparison variable for annulus ``i``.

    For ``i = 1`` the extra point sits in ``H_1``: ``W ~ B(z, r)`` against
    ``W_hat ~ B(z + 1, r)``.  Further out ``W ~ B(z, r)`` is compared with
    ``W_hat + 1`` where ``W_hat ~ B(z, r)``.
    """
    pmf = _binom_pmf(z, r)
    if first:
        return pmf, _binom_pmf(z + 1, r)
    return pmf, np.concatenate([[0.0], pmf])


def _tv(a: np.ndarray, b: np.ndarray) -> float:
    size = max(a.size, b.size)
    return float(0.5 * np.abs(np.pad(a, (0, size - a.size)) - np.pad(b, (0, size - b.size))).sum())


@dataclass
class CouplingTranscript:
    d: int
    i_max: int
    zeta: list | None
    z: np.ndarray
    z_hat: np.ndarray
    w: np.ndarray
    w_hat: np.ndarray
    u: np.ndarray
    u_hat: np.ndarray
    tv_terms: np.ndarray
    event_e: bool
    success: bool

    def to_record(self) -> dict:
        rec = {
            "d": self.d, "i_max": self.i_max,
            "Z": self.z.tolist(), "Z_hat": self.z_hat.tolist(),
            "W": self.w.tolist(), "W_hat": self.w_hat.tolist(),
            "U": self.u.tolist(), "U_hat": self.u_hat.tolist(),
            "tv_terms": [float(v) for v in self.tv_terms],
            "event_E": bool(self.event_e), "success": bool(self.success),
        }
        if self.zeta is not None:
            rec["zeta_on"] = [list(map(int, s)) for s in self.zeta]
        return rec


def _u_from(z: np.ndarray, w: np.ndarray) -> np.ndarray:
    u = w.copy()
    u[1:] += z[:-1] - w[:-1]
    return u


def run_coupling(table: MixtureTable, gen: np.random.Generator,
                 annuli: AnnulusDecomposition | None = None) -> CouplingTranscript:
    """One run of the annulus-by-annulus coupling.

    With ``annuli`` carrying site lists, the per-site Bernoulli choices are
    drawn and recorded; otherwise the counts ``Z_i`` are drawn directly.
    """
    i_max = table.i_max
    zeta = None
    if annuli is not None and annuli.sites is not None:
        zeta = []
        z = np.empty(i_max, dtype=np.int64)
        for i in range(i_max):
            on = gen.random(len(annuli.sites[i])) < table.p[i]
            zeta.append(np.flatnonzero(on))
            z[i] = on.sum()
    else:
        z = gen.binomial(table.counts, table.p).astype(np.int64)
    z_hat = z.copy()
    z_hat[0] += 1
    w = np.empty(i_max, dtype=np.int64)
    w_hat = np.empty(i_max, dtype=np.int64)
    tv = np.empty(i_max)
    for i in range(i_max):
        pa, pb = _pair_pmfs(int(z[i]), float(table.r[i]), i == 0)
        tv[i] = _tv(pa, pb)
        a, b = maximal_coupling(pa, pb, gen)
        w[i] = a
        w_hat[i] = b if i == 0 else b - 1
    u = _u_from(z, w)
    u_hat = _u_from(z_hat, w_hat)
    event = all(z[i] >= table.z_threshold(i + 1) for i in range(i_max))
    success = bool(np.array_equal(u, u_hat))
    return CouplingTranscript(table.d, i_max, zeta, z, z_hat, w, w_hat, u, u_hat, tv, event, success)


def exact_success_probability(table: MixtureTable, tail: float = 1e-14) -> float:
    """``P(U_i = U_hat_i for all i <= i_max)``, summing over the independent counts ``Z_i``."""
    total = 1.0
    for i in range(table.i_max):
        n, p, r = int(table.counts[i]), float(table.p[i]), float(table.r[i])
        lo, hi = (int(v) for v in stats.binom.interval(1 - tail, n, p))
        zs = np.arange(lo, hi + 1)
        weights = stats.binom.pmf(zs, n, p)
        agree = np.array([1.0 - _tv(*_pair_pmfs(int(k), r, i == 0)) for k in zs])
        total *= float((weights * agree).sum())
    return total


def conditional_tv_terms(table: MixtureTable, tail: float = 1e-14) -> np.ndarray:
    """``E[d_TV term_i | Z_i >= threshold_i]`` for each annulus."""
    out = np.empty(table.i_max)
    for i in range(table.i_max):
        n, p, r = int(table.counts[i]), float(table.p[i]), float(table.r[i])
        zmin = int(math.ceil(table.z_threshold(i + 1)))
        hi = max(int(stats.binom.isf(tail, n, p)), zmin)
        zs = np.arange(zmin, min(hi, n) + 1)
        if zs.size == 0:
            out[i] = math.nan
            continue
        weights = stats.binom.pmf(zs, n, p)
        terms = np.array([_tv(*_pair_pmfs(int(k), r, i == 0)) for k in zs])
        out[i] = float((weights * terms).sum() / weights.sum()) if weights.sum() > 0 else math.nan
    return out


@dataclass
class CouplingSummary:
    runs: int
    successes: int
    success_rate: float
    ci_lo: float
    ci_hi: float
    event_rate: float
    mean_z: np.ndarray
    z_slope: float
    partial_tv: np.ndarray
    last_quarter_share: float
    exact_success: float


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def last_quarter_share(terms: np.ndarray) -> float:
    """Share of the summed terms that falls in the last quarter of the index range."""
    terms = np.asarray(terms, dtype=float)
    m = terms.size
    cut = m - max(1, int(round(m / 4)))
    total = float(np.nansum(terms))
    return float(np.nansum(terms[cut:]) / total) if total > 0 else math.nan


def summarize_runs(table: MixtureTable, transcripts: list[CouplingTranscript]) -> CouplingSummary:
    n = len(transcripts)
    succ = sum(t.success for t in transcripts)
    lo, hi = wilson_interval(succ, n)
    zs = np.array([t.z for t in transcripts], dtype=float)
    mean_z = zs.mean(axis=0)
    idx = np.arange(2, table.i_max + 1)
    use = mean_z[1:] > 0
    slope = float(np.polyfit(idx[use], np.log2(mean_z[1:][use]), 1)[0]) if use.sum() >= 2 else math.nan
    cond = conditional_tv_terms(table)[1:]
    partial = np.nancumsum(cond)
    return CouplingSummary(n, succ, succ / n, lo, hi, float(np.mean([t.event_e for t in transcripts])),
                           mean_z, slope, partial, last_quarter_share(cond), exact_success_probability(table))
