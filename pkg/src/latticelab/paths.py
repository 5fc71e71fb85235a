"""Oriented random paths, their intersections and second-moment factors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError
from .laws import GAUSSIAN, FactorEstimate, PerturbationLaw, chi_square_factor, pair_product_factor, sample_sites
from .rng import SiteRandomness

MIN_BIN_COUNT = 50
BOOTSTRAP = 200


@dataclass(frozen=True)
class OrientedPath:
    """A path from the origin taking unit steps ``e_{steps[k]}``."""

    steps: np.ndarray
    d: int

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.int64)
        if steps.ndim != 1 or (steps.size and (steps.min() < 0 or steps.max() >= self.d)):
            raise ConfigurationError("steps must be indices in [0, d)")
        steps.flags.writeable = False
        object.__setattr__(self, "steps", steps)

    @property
    def n(self) -> int:
        return self.steps.size

    @property
    def sites(self) -> np.ndarray:
        """The ``n + 1`` visited sites, starting at the origin."""
        out = np.zeros((self.n + 1, self.d), dtype=np.int64)
        out[1:] = np.cumsum(np.eye(self.d, dtype=np.int64)[self.steps], axis=0)
        return out


@dataclass(frozen=True)
class PathMeasureSpec:
    d: int
    step_weights: tuple = ()

    def __post_init__(self):
        w = self.step_weights or tuple([1.0 / self.d] * self.d)
        if len(w) != self.d or min(w) <= 0 or not math.isclose(sum(w), 1.0, rel_tol=1e-9):
            raise ConfigurationError("step_weights must be d positive numbers summing to 1")
        object.__setattr__(self, "step_weights", tuple(float(v) for v in w))

    @classmethod
    def uniform(cls, d: int) -> "PathMeasureSpec":
        return cls(d)


def sample_steps(spec: PathMeasureSpec, n: int, size: int, gen: np.random.Generator) -> np.ndarray:
    """``size`` independent step sequences of length ``n``, shape ``(size, n)``."""
    cdf = np.cumsum(spec.step_weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, gen.random((size, n)), side="right").astype(np.int8)


def sample_path(spec: PathMeasureSpec, n: int, gen: np.random.Generator) -> OrientedPath:
    return OrientedPath(sample_steps(spec, n, 1, gen)[0], spec.d)


def intersection_count(a: OrientedPath, b: OrientedPath) -> int:
    """Number of sites visited by both paths."""
    sa = {tuple(s) for s in a.sites}
    return sum(1 for s in b.sites if tuple(s) in sa)


def _positions(steps: np.ndarray, d: int) -> np.ndarray:
    """Site codes along each path (oriented paths meet only at equal times)."""
    size, n = steps.shape
    base = n + 1
    weights = base ** np.arange(d - 1, dtype=np.int64)
    code = np.zeros((size, n + 1), dtype=np.int64)
    if d > 1:
        incr = np.where(steps < d - 1, weights[np.minimum(steps, d - 2)], 0)
        code[:, 1:] = np.cumsum(incr, axis=1)
    return code


def batch_overlaps(a: np.ndarray, b: np.ndarray, d: int, terminal_a=None, terminal_b=None):
    """Shared-site counts for paired step arrays of equal length.

    Returns ``(shared, step_pairs)`` where ``step_pairs[r, j, k]`` counts the
    shared sites of pair ``r`` that path ``a`` leaves along ``e_j`` and path
    ``b`` along ``e_k``.  The last site uses the terminal steps when given and
    is left out of ``step_pairs`` otherwise.
    """
    if d > 1 and (a.shape[1] + 1) ** (d - 1) >= 2**62:
        raise ConfigurationError("path too long for the site encoding")
    meet = _positions(a, d) == _positions(b, d)
    shared = meet.sum(axis=1)
    if terminal_a is None:
        meet, nxt_a, nxt_b = meet[:, :-1], a, b
    else:
        nxt_a = np.concatenate([a, np.asarray(terminal_a)[:, None]], axis=1)
        nxt_b = np.concatenate([b, np.asarray(terminal_b)[:, None]], axis=1)
    code = nxt_a.astype(np.int64) * d + nxt_b
    rows = np.broadcast_to(np.arange(a.shape[0])[:, None], code.shape)
    pairs = np.zeros((a.shape[0], d * d), dtype=np.int64)
    np.add.at(pairs, (rows[meet], code[meet]), 1)
    return shared, pairs.reshape(-1, d, d)


# ---------------------------------------------------------------- tail curves

@dataclass
class TailCurve:
    n: int
    k: np.ndarray
    survival: np.ndarray
    fit: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    theta_hat: float
    theta_lo: float
    theta_hi: float
    fit_available: bool
    reason: str = ""
    curvature: float = 0.0
    curvature_ci: tuple = (0.0, 0.0)
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def rows(self) -> list[dict]:
        return [
            {"k": int(k), "survival": float(s), "fit": float(f), "lo": float(lo), "hi": float(hi)}
            for k, s, f, lo, hi in zip(self.k, self.survival, self.fit, self.lo, self.hi)
        ]


def _fit_log_survival(k, counts, total, degree):
    """Least-squares fit of log-survival in ``k``."""
    y = np.log(counts / total)
    return np.polyfit(k.astype(float), y, degree)


def _tail_from_counts(n: int, shared: np.ndarray, gen: np.random.Generator,
                      min_count: int = MIN_BIN_COUNT, n_boot: int = BOOTSTRAP) -> TailCurve:
    total = shared.size
    kmax = int(shared.max())
    hist = np.bincount(shared, minlength=kmax + 2)
    surv_counts = np.cumsum(hist[::-1])[::-1]  # surv_counts[k] = #{N >= k}
    ks = np.arange(1, kmax + 1)
    counts = surv_counts[1 : kmax + 1]
    use = counts >= min_count
    k_fit = ks[use]
    survival = counts / total
    boot_hists = gen.multinomial(total, hist[: kmax + 1] / total, size=n_boot)
    boot_surv = np.cumsum(boot_hists[:, ::-1], axis=1)[:, ::-1][:, 1 : kmax + 1]
    if k_fit.size < 3:
        nan = np.full(ks.size, np.nan)
        return TailCurve(n, ks, survival, nan, nan, nan, math.nan, math.nan, math.nan, False,
                         "fewer than three bins with enough counts", counts=counts)
    slope, icpt = _fit_log_survival(k_fit, counts[use], total, 1)
    theta = math.exp(slope)
    boot_theta = np.empty(n_boot)
    boot_curv = np.empty(n_boot)
    for b in range(n_boot):
        c = np.maximum(boot_surv[b, use], 0.5)
        boot_theta[b] = math.exp(_fit_log_survival(k_fit, c, total, 1)[0])
        if k_fit.size >= 5:
            boot_curv[b] = _fit_log_survival(k_fit, c, total, 2)[0]
    theta_lo, theta_hi = np.quantile(boot_theta, [0.025, 0.975])
    fit = np.exp(icpt + slope * ks)
    lo = np.quantile(boot_surv / total, 0.025, axis=0)
    hi = np.quantile(boot_surv / total, 0.975, axis=0)
    available, reason, curv, curv_ci = True, "", 0.0, (0.0, 0.0)
    if k_fit.size >= 5:
        curv = float(_fit_log_survival(k_fit, counts[use], total, 2)[0])
        curv_ci = tuple(float(v) for v in np.quantile(boot_curv, [0.025, 0.975]))
        if curv_ci[1] < 0:
            available, reason = False, "log-survival is significantly concave; no single geometric rate fits"
    if theta >= 1.0 - 1e-12:
        reason = reason or "no decay across the fitted bins"
    return TailCurve(n, ks, survival, fit, lo, hi, theta, float(theta_lo), float(theta_hi),
                     available, reason, curv, curv_ci, counts)


def eit_tail_estimate(spec: PathMeasureSpec, n_grid: int | Sequence[int], replicates: int,
                      gen: np.random.Generator, chunk: int = 2000):
    """Survival curve of the intersection count of two independent paths.

    Returns one ``TailCurve`` for an integer ``n_grid`` and a dict keyed by
    ``n`` for a sequence.
    """
    if isinstance(n_grid, (int, np.integer)):
        return _eit_single(spec, int(n_grid), replicates, gen, chunk)
    return {int(n): _eit_single(spec, int(n), replicates, gen, chunk) for n in n_grid}


def intersection_samples(spec: PathMeasureSpec, n: int, replicates: int, gen: np.random.Generator,
                         chunk: int = 2000, with_step_pairs: bool = False):
    """Intersection counts of ``replicates`` independent pairs of ``n``-step paths.

    Each path also draws one extra step, used as the outgoing direction of
    its last site in ``step_pairs``.
    """
    shared, pairs = [], []
    done = 0
    while done < replicates:
        m = min(chunk, replicates - done)
        a = sample_steps(spec, n + 1, m, gen)
        b = sample_steps(spec, n + 1, m, gen)
        s, t = batch_overlaps(a[:, :n], b[:, :n], spec.d, a[:, n], b[:, n])
        shared.append(s)
        pairs.append(t)
        done += m
    shared = np.concatenate(shared)
    if with_step_pairs:
        return shared, np.concatenate(pairs)
    return shared


def _eit_single(spec, n, replicates, gen, chunk):
    if n < 1 or replicates < 2:
        raise ConfigurationError("need n >= 1 and at least two replicate pairs")
    shared = intersection_samples(spec, n, replicates, gen, chunk)
    return _tail_from_counts(n, shared, gen)


# ---------------------------------------------------------------- shifted fields

Field = Callable[[np.ndarray], np.ndarray]


def law_field(law: PerturbationLaw, rng: SiteRandomness) -> Field:
    """Field access ``sites -> perturbations`` for i.i.d. site variables."""
    return lambda sites: sample_sites(law, sites, rng)


class ShiftedField:
    """``Y`` with ``sign * (next site - site)`` added along a path.

    The site reached by the last step is shifted toward ``e_terminal_step``.
    """

    def __init__(self, base: Field, path: OrientedPath, terminal_step: int = 0, sign: int = 1):
        if not 0 <= terminal_step < path.d:
            raise ConfigurationError("terminal_step out of range")
        self.base = base
        self.path = path
        self.terminal_step = int(terminal_step)
        self.sign = sign
        sites = path.sites
        nxt = np.concatenate([path.steps, [self.terminal_step]])
        self._shift = {tuple(s): int(k) for s, k in zip(sites, nxt)}

    def __call__(self, sites) -> np.ndarray:
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        out = np.array(self.base(sites), dtype=np.float64, copy=True)
        for r, s in enumerate(sites):
            k = self._shift.get(tuple(s))
            if k is not None:
                out[r, k] += self.sign
        return out

    def same_path(self, other: "ShiftedField") -> bool:
        return (self.terminal_step == other.terminal_step and self.path.d == other.path.d
                and np.array_equal(self.path.steps, other.path.steps))


def shifted_field(base: Field, path: OrientedPath, terminal_step: int = 0, sign: int = 1) -> Field:
    """Shift ``base`` along ``path``; shifting back along the same path returns ``base`` itself."""
    if isinstance(base, ShiftedField) and base.sign == -sign and base.same_path(
            ShiftedField(base.base, path, terminal_step, sign)):
        return base.base
    return ShiftedField(base, path, terminal_step, sign)


# ---------------------------------------------------------------- second moment

@dataclass
class SecondMomentReport:
    rho: float
    theta_hat: float
    rho_theta: float
    bound_mean: float
    bound_se: float
    exact_mean: float
    exact_se: float
    half_bound_mean: float
    relative_change: float
    bounded: bool
    inequality_holds: bool
    divergent: bool
    replicates: int
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else v) for k, v in self.__dict__.items()}


def pair_factor_table(law: PerturbationLaw, mc_budget: int = 200_000, gen=None) -> np.ndarray:
    d = law.dim
    table = np.empty((d, d))
    for j in range(d):
        for k in range(j, d):
            table[j, k] = table[k, j] = pair_product_factor(law, j, k, mc_budget, gen).value
    return table


def second_moment_estimate(law: PerturbationLaw, spec: PathMeasureSpec, n: int, replicates: int,
                           gen: np.random.Generator, mc_budget: int = 200_000,
                           stability_tol: float = 0.05) -> SecondMomentReport:
    """Monte Carlo estimate of ``E[rho**N]`` over independent path pairs, plus the exact factor.

    The exact factor of a pair multiplies one pair-product factor per shared
    site; it never exceeds ``rho**N``.  Stability compares the estimate over
    the first half of the pairs with the estimate over all of them.
    """
    if law.dim != spec.d:
        raise ConfigurationError("law and path measure dimensions differ")
    notes = []
    factors = [chi_square_factor(law, i, mc_budget, gen) for i in range(law.dim)]
    divergent = any(f.divergent for f in factors)
    rho = max(f.value for f in factors)
    if divergent:
        notes.append("chi-square factor estimate did not stabilize")
    shared, pairs = intersection_samples(spec, n, replicates, gen, with_step_pairs=True)
    log_rho = math.log(rho)
    log_bound = shared * log_rho
    if law.kind == GAUSSIAN:
        log_table = np.zeros((law.dim, law.dim))
        np.fill_diagonal(log_table, 1.0 / law.effective_sigma**2)
    else:
        log_table = np.log(pair_factor_table(law, mc_budget, gen))
    log_exact = np.einsum("rjk,jk->r", pairs, log_table)
    bound = np.exp(log_bound)
    exact = np.exp(log_exact)
    check = bool(np.all(log_exact <= log_bound + 1e-9 * np.maximum(1.0, np.abs(log_bound))))
    half = replicates // 2
    bm, hm = float(bound.mean()), float(bound[:half].mean())
    rel = abs(bm - hm) / bm if bm > 0 else math.inf
    tail = _tail_from_counts(n, shared, gen)
    theta = tail.theta_hat
    rho_theta = rho * theta if np.isfinite(theta) else math.inf
    bounded = bool(np.isfinite(bm) and rel < stability_tol and rho_theta < 1 and not divergent)
    return SecondMomentReport(
        rho=rho,
        theta_hat=theta,
        rho_theta=rho_theta,
        bound_mean=bm,
        bound_se=float(bound.std(ddof=1) / math.sqrt(replicates)),
        exact_mean=float(exact.mean()),
        exact_se=float(exact.std(ddof=1) / math.sqrt(replicates)),
        half_bound_mean=hm,
        relative_change=rel,
        bounded=bounded,
        inequality_holds=bool(check),
        divergent=divergent,
        replicates=replicates,
        notes=notes,
    )
