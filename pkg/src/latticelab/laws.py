"""Perturbation laws: sampling, densities, density ratios and chi-square factors."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import integrate, special, stats

from .errors import ConfigurationError
from .rng import SiteRandomness, site_uniforms

GAUSSIAN = "gaussian"
STABLE = "stable_symmetric"
POWER_TAIL = "power_tail"
KINDS = (GAUSSIAN, STABLE, POWER_TAIL)

DENSITY_TOL = 1e-6
DIVERGENCE_MIN_BUDGET = 100_000
DIVERGENCE_SHARE = 0.5


@dataclass(frozen=True)
class PerturbationLaw:
    """A law on R^d.  ``scale`` multiplies a draw from the base law.

    For the symmetric stable family ``scale`` is the usual scale parameter
    (characteristic function ``exp(-|scale * t|**alpha)``).
    """

    kind: str
    dim: int = 1
    sigma: float | None = None
    alpha: float | None = None
    alpha_exponent: float | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"kind: unknown law family {self.kind!r}")
        if not isinstance(self.dim, (int, np.integer)) or self.dim < 1:
            raise ConfigurationError(f"dim: must be a positive integer, got {self.dim!r}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ConfigurationError(f"scale: must be positive, got {self.scale!r}")
        if self.kind == GAUSSIAN:
            if self.sigma is None or not (np.isfinite(self.sigma) and self.sigma > 0):
                raise ConfigurationError(f"sigma: must be positive, got {self.sigma!r}")
        elif self.kind == STABLE:
            if self.alpha is None or not (0 < self.alpha <= 2):
                raise ConfigurationError(f"alpha: must lie in (0, 2], got {self.alpha!r}")
            if self.dim != 1:
                raise ConfigurationError("dim: symmetric stable laws are provided for d = 1 only")
        else:
            a = self.alpha_exponent
            if a is None or not (np.isfinite(a) and a > self.dim):
                raise ConfigurationError(
                    f"alpha_exponent: must exceed the dimension {self.dim} for a normalizable tail, got {a!r}"
                )

    @classmethod
    def gaussian(cls, sigma: float, dim: int = 1, scale: float = 1.0) -> "PerturbationLaw":
        return cls(GAUSSIAN, dim=dim, sigma=float(sigma), scale=scale)

    @classmethod
    def stable(cls, alpha: float, scale: float = 1.0) -> "PerturbationLaw":
        return cls(STABLE, dim=1, alpha=float(alpha), scale=float(scale))

    @classmethod
    def power_tail(cls, alpha_exponent: float, dim: int = 1, scale: float = 1.0) -> "PerturbationLaw":
        return cls(POWER_TAIL, dim=dim, alpha_exponent=float(alpha_exponent), scale=scale)

    def scaled(self, factor: float) -> "PerturbationLaw":
        return replace(self, scale=self.scale * factor)

    @property
    def effective_sigma(self) -> float:
        """Per-coordinate standard deviation of a Gaussian law."""
        if self.kind != GAUSSIAN:
            raise ConfigurationError("effective_sigma is defined for Gaussian laws only")
        return self.sigma * self.scale

    @property
    def uniforms_per_site(self) -> int:
        if self.kind == GAUSSIAN:
            return self.dim
        if self.kind == STABLE:
            return 2
        return self.dim + 1

    def to_dict(self, rng: SiteRandomness | None = None) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == GAUSSIAN:
            out["sigma"] = self.sigma
        elif self.kind == STABLE:
            out["alpha"] = self.alpha
        else:
            out["alpha_exponent"] = self.alpha_exponent
        out["scale"] = self.scale
        out["dim"] = self.dim
        if rng is not None:
            out["seed"] = rng.global_seed
            out["stream"] = rng.stream_id
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PerturbationLaw":
        law, _ = law_from_dict(data)
        return law


def law_from_dict(data: dict, path: str = "law") -> tuple[PerturbationLaw, SiteRandomness | None]:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping")
    kind = data.get("kind")
    known = {"kind", "sigma", "alpha", "alpha_exponent", "scale", "dim", "seed", "stream"}
    extra = set(data) - known
    if extra:
        raise ConfigurationError(f"{path}: unknown keys {sorted(extra)}")
    try:
        law = PerturbationLaw(
            kind=kind,
            dim=int(data.get("dim", 1)),
            sigma=data.get("sigma"),
            alpha=data.get("alpha"),
            alpha_exponent=data.get("alpha_exponent"),
            scale=float(data.get("scale", 1.0)),
        )
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}.{exc}") from None
    rng = None
    if "seed" in data:
        rng = SiteRandomness(int(data["seed"]), int(data.get("stream", 0)))
    return law, rng


# ---------------------------------------------------------------- sampling

def _power_tail_radius(u: np.ndarray, d: int, a: float) -> np.ndarray:
    z_inner = 1.0 / d
    z = z_inner + 1.0 / (a - d)
    t = u * z
    r = np.empty_like(t)
    inner = t <= z_inner
    r[inner] = (d * t[inner]) ** (1.0 / d)
    r[~inner] = (1.0 - (t[~inner] - z_inner) * (a - d)) ** (1.0 / (d - a))
    return r


def transform_uniforms(law: PerturbationLaw, u: np.ndarray) -> np.ndarray:
    """Map ``(n, law.uniforms_per_site)`` uniforms to ``(n, dim)`` draws."""
    u = np.asarray(u, dtype=np.float64)
    d = law.dim
    if law.kind == GAUSSIAN:
        y = special.ndtri(u) * law.sigma
    elif law.kind == STABLE:
        a = law.alpha
        v = np.pi * (u[:, 0] - 0.5)
        w = -np.log(u[:, 1])
        if a == 1.0:
            y = np.tan(v)
        else:
            y = (np.sin(a * v) / np.cos(v) ** (1.0 / a)) * (np.cos((1.0 - a) * v) / w) ** ((1.0 - a) / a)
        y = y[:, None]
    else:
        r = _power_tail_radius(u[:, d], d, law.alpha_exponent)
        if d == 1:
            direction = np.where(u[:, 0] < 0.5, -1.0, 1.0)[:, None]
        else:
            g = special.ndtri(u[:, :d])
            direction = g / np.linalg.norm(g, axis=1, keepdims=True)
        y = direction * r[:, None]
    return y * law.scale


def sample_sites(law: PerturbationLaw, sites, rng: SiteRandomness) -> np.ndarray:
    """Perturbations attached to each site, shape ``(n, dim)``.

    The value at a site depends only on ``(law, site, rng)``.
    """
    sites = np.asarray(sites, dtype=np.int64)
    if sites.ndim == 1:
        sites = sites[None, :] if law.dim > 1 or sites.size == 1 else sites[:, None]
    if sites.shape[1] != law.dim:
        raise ConfigurationError(f"site dimension {sites.shape[1]} does not match law dimension {law.dim}")
    return transform_uniforms(law, site_uniforms(sites, law.uniforms_per_site, rng))


def sample(law: PerturbationLaw, site, rng: SiteRandomness) -> np.ndarray:
    """The perturbation at a single site."""
    return sample_sites(law, np.atleast_1d(np.asarray(site, dtype=np.int64))[None, :], rng)[0]


def draw(law: PerturbationLaw, n: int, gen: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. draws from a numpy generator, for Monte Carlo work off the lattice."""
    u = gen.random((n, law.uniforms_per_site))
    u[u == 0.0] = 2.0**-54
    return transform_uniforms(law, u)


# ---------------------------------------------------------------- densities

def _sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def power_tail_constant(d: int, a: float) -> float:
    """Normalizer ``C`` of ``C * min(1, |y|**-a)`` on R^d."""
    return 1.0 / (_sphere_area(d) * (1.0 / d + 1.0 / (a - d)))


@dataclass(frozen=True)
class DensityValue:
    value: np.ndarray
    abs_error: float
    accurate: bool


def _stable_unit_density(y: float, alpha: float) -> tuple[float, float]:
    y = abs(float(y))
    if y == 0.0:
        return math.gamma(1.0 + 1.0 / alpha) / math.pi, 0.0
    val, err = integrate.quad(lambda t: math.exp(-(t**alpha)), 0.0, np.inf, weight="cos", wvar=y, limlst=200)
    return val / math.pi, err / math.pi


def density_eval(law: PerturbationLaw, y) -> DensityValue:
    """Density at ``y`` (shape ``(..., dim)``; plain scalars allowed when dim is 1)."""
    y = np.asarray(y, dtype=np.float64)
    if law.dim == 1 and (y.ndim == 0 or y.shape[-1] != 1):
        y = y[..., None]
    if y.shape[-1] != law.dim:
        raise ConfigurationError("evaluation point has the wrong dimension")
    s = law.scale
    x = y / s
    err = 0.0
    if law.kind == GAUSSIAN:
        sig = law.sigma
        val = np.exp(-0.5 * np.sum(x * x, axis=-1) / sig**2) / (math.sqrt(2 * math.pi) * sig) ** law.dim
    elif law.kind == POWER_TAIL:
        a = law.alpha_exponent
        r = np.linalg.norm(x, axis=-1)
        val = power_tail_constant(law.dim, a) * np.where(r <= 1.0, 1.0, np.maximum(r, 1.0) ** -a)
    else:
        a = law.alpha
        x1 = x[..., 0]
        if a == 1.0:
            val = 1.0 / (math.pi * (1.0 + x1 * x1))
        elif a == 2.0:
            val = np.exp(-x1 * x1 / 4.0) / math.sqrt(4.0 * math.pi)
        else:
            flat = x1.reshape(-1)
            out = np.empty(flat.size)
            for k, v in enumerate(flat):
                out[k], e = _stable_unit_density(v, a)
                err = max(err, e)
            val = out.reshape(x1.shape)
    val = np.asarray(val) / s**law.dim
    err = err / s**law.dim
    return DensityValue(val, err, err <= DENSITY_TOL)


def density(law: PerturbationLaw, y) -> np.ndarray:
    return density_eval(law, y).value


def density_ratio(law: PerturbationLaw, y, direction: int) -> np.ndarray:
    """``g(y + e_direction) / g(y)``."""
    y = np.asarray(y, dtype=np.float64)
    if law.dim == 1 and (y.ndim == 0 or y.shape[-1] != 1):
        y = y[..., None]
    if not 0 <= direction < law.dim:
        raise ConfigurationError(f"direction {direction} out of range for dimension {law.dim}")
    s = law.scale
    if law.kind == GAUSSIAN:
        sig = law.effective_sigma
        return np.exp(-(2.0 * y[..., direction] + 1.0) / (2.0 * sig * sig))
    shifted = y.copy()
    shifted[..., direction] += 1.0
    if law.kind == POWER_TAIL:
        a = law.alpha_exponent
        r0 = np.maximum(np.linalg.norm(y / s, axis=-1), 1.0)
        r1 = np.maximum(np.linalg.norm(shifted / s, axis=-1), 1.0)
        return (r0 / r1) ** a
    if law.alpha == 1.0:
        x0 = y[..., 0] / s
        x1 = shifted[..., 0] / s
        return (1.0 + x0 * x0) / (1.0 + x1 * x1)
    return density(law, shifted) / density(law, y)


def tail_probability(law: PerturbationLaw, t: float) -> float:
    """An upper bound on ``P(|Y|_inf > t)``, exact in one dimension."""
    if t <= 0:
        return 1.0
    x = t / law.scale
    if law.kind == GAUSSIAN:
        q = 2.0 * stats.norm.sf(x / law.sigma)
        return float(-np.expm1(law.dim * np.log1p(-q))) if q < 1 else 1.0
    if law.kind == STABLE:
        if law.alpha == 1.0:
            return float(1.0 - 2.0 / math.pi * math.atan(x))
        if law.alpha == 2.0:
            return float(2.0 * stats.norm.sf(x / math.sqrt(2.0)))
        return float(2.0 * stats.levy_stable.sf(x, law.alpha, 0.0))
    d, a = law.dim, law.alpha_exponent
    # radial tail bounds the sup-norm tail since |y|_inf <= |y|_2
    c = power_tail_constant(d, a) * _sphere_area(d)
    if x <= 1.0:
        return float(1.0 - c * x**d / d)
    return float(c * x ** (d - a) / (a - d))


# ---------------------------------------------------------------- chi-square

@dataclass(frozen=True)
class FactorEstimate:
    value: float
    std_error: float
    closed_form: bool
    divergent: bool = False
    samples: int = 0


def _mc_mean(terms: np.ndarray) -> FactorEstimate:
    n = terms.size
    total = terms.sum()
    mean = total / n
    se = terms.std(ddof=1) / math.sqrt(n) if n > 1 else math.inf
    divergent = bool(n >= DIVERGENCE_MIN_BUDGET and total > 0 and terms.max() > DIVERGENCE_SHARE * total)
    if not np.isfinite(mean):
        divergent = True
    return FactorEstimate(float(mean), float(se), False, divergent, n)


def chi_square_factor(
    law: PerturbationLaw,
    direction: int = 0,
    mc_budget: int = 1_000_000,
    gen: np.random.Generator | None = None,
    closed_form: bool = True,
) -> FactorEstimate:
    """``E[(g(Y + e_i) / g(Y))**2]`` under the law of ``Y``."""
    if law.kind == GAUSSIAN and closed_form:
        return FactorEstimate(math.exp(1.0 / law.effective_sigma**2), 0.0, True)
    if gen is None:
        gen = np.random.default_rng(0)
    y = draw(law, mc_budget, gen)
    return _mc_mean(density_ratio(law, y, direction) ** 2)


def pair_product_factor(
    law: PerturbationLaw,
    j: int,
    k: int,
    mc_budget: int = 1_000_000,
    gen: np.random.Generator | None = None,
    closed_form: bool = True,
) -> FactorEstimate:
    """``E[g(Y + e_j) g(Y + e_k) / g(Y)**2]``."""
    if law.kind == GAUSSIAN and closed_form:
        v = math.exp(1.0 / law.effective_sigma**2) if j == k else 1.0
        return FactorEstimate(v, 0.0, True)
    if gen is None:
        gen = np.random.default_rng(0)
    y = draw(law, mc_budget, gen)
    return _mc_mean(density_ratio(law, y, j) * density_ratio(law, y, k))


def margin_for(law: PerturbationLaw, p: float = 1e-6, limit: int = 10**7) -> int:
    """Smallest integer M with ``P(|Y|_inf > M + 1/2) <= p``; ``limit + 1`` if none below ``limit``."""
    if tail_probability(law, 0.5) <= p:
        return 0
    lo, hi = 0, 1
    while tail_probability(law, hi + 0.5) > p:
        lo, hi = hi, hi * 2
        if hi > limit:
            return limit + 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if tail_probability(law, mid + 0.5) > p:
            lo = mid
        else:
            hi = mid
    return hi
