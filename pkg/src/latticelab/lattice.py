"""Perturbed lattices, finite-window realization and point-configuration I/O."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .errors import ConfigurationError, ResourceError
from .laws import PerturbationLaw, law_from_dict, margin_for, sample_sites
from .rng import SiteRandomness

TAIL_BUDGET = 1e-6
SITE_BUDGET = 30_000_000
PLAIN, FIRST, SECOND, INSERTED = 0, 1, 2, -1


@dataclass(frozen=True)
class Window:
    """The observation box ``[-radius - 1/2, radius + 1/2]^d``.

    Sites are realized out to ``radius + margin`` so that points displaced
    into the box from outside are included.
    """

    d: int
    radius: int
    margin: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ConfigurationError("window.d: must be positive")
        if self.radius < 0 or self.margin < 0:
            raise ConfigurationError("window: radius and margin must be non-negative")

    @classmethod
    def for_law(cls, law: PerturbationLaw, radius: int, p: float = TAIL_BUDGET,
                site_budget: int = SITE_BUDGET) -> "Window":
        limit = int(site_budget ** (1.0 / law.dim)) // 2 + 1
        m = margin_for(law, p, limit=limit)
        w = cls(law.dim, radius, m)
        if m > limit or w.site_count > site_budget:
            raise ResourceError(
                f"a margin of {m} sites is needed to keep the boundary loss below {p:g}, "
                f"which exceeds the site budget {site_budget}; pass an explicit margin"
            )
        return w

    @property
    def half_width(self) -> float:
        return self.radius + 0.5

    @property
    def extent(self) -> int:
        return self.radius + self.margin

    @property
    def site_count(self) -> int:
        return (2 * self.extent + 1) ** self.d

    def sites(self) -> np.ndarray:
        """All realized sites in lexicographic order, shape ``(n, d)``."""
        r = np.arange(-self.extent, self.extent + 1, dtype=np.int64)
        grids = np.meshgrid(*([r] * self.d), indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)

    def site_index(self, sites) -> np.ndarray:
        """Position of each site in ``sites()``; -1 for sites outside the realized box."""
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        e = self.extent
        side = 2 * e + 1
        shifted = sites + e
        inside = np.all((shifted >= 0) & (shifted < side), axis=1)
        idx = np.zeros(len(sites), dtype=np.int64)
        for k in range(self.d):
            idx = idx * side + shifted[:, k]
        return np.where(inside, idx, -1)

    def contains(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return np.all(np.abs(points) <= self.half_width, axis=-1)

    def to_dict(self) -> dict:
        return {"d": self.d, "radius": self.radius, "margin": self.margin}


@dataclass(frozen=True)
class DoubledSpec:
    """Two points per site: ``x + Y_x + Y'_{x,i}`` for ``i = 1, 2``.

    ``Y`` has per-coordinate standard deviation ``sqrt(sigma**2 - delta**2)``
    and ``Y'`` has ``delta``, so each point is marginally ``N(x, sigma**2 I)``.
    """

    sigma: float
    delta: float

    def __post_init__(self):
        if not (0 < self.delta < self.sigma):
            raise ConfigurationError("doubled: need 0 < delta < sigma")

    @property
    def common_sigma(self) -> float:
        return math.sqrt(self.sigma**2 - self.delta**2)


def _site_key(s, layer=None):
    s = tuple(int(v) for v in np.atleast_1d(s))
    return s if layer is None else (s, int(layer))


@dataclass(frozen=True)
class ProcessSpec:
    law: PerturbationLaw | None
    deleted_sites: frozenset = field(default_factory=frozenset)
    inserted_points: tuple = ()
    doubled: DoubledSpec | None = None

    def __post_init__(self):
        if (self.law is None) == (self.doubled is None):
            raise ConfigurationError("process: give exactly one of a law or a doubled specification")

    @property
    def dim(self) -> int | None:
        return self.law.dim if self.law is not None else None

    def to_dict(self) -> dict:
        out: dict = {}
        if self.law is not None:
            out["law"] = self.law.to_dict()
        if self.doubled is not None:
            out["doubled"] = {"sigma": self.doubled.sigma, "delta": self.doubled.delta}
        dels = []
        for s in sorted(self.deleted_sites, key=repr):
            if self.doubled is not None:
                dels.append({"site": list(s[0]), "layer": s[1]})
            else:
                dels.append(list(s))
        out["deleted_sites"] = dels
        out["inserted_points"] = [list(p) for p in self.inserted_points]
        return out

    @classmethod
    def from_dict(cls, data: dict, path: str = "process") -> "ProcessSpec":
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected a mapping")
        law = None
        doubled = None
        if "law" in data and data["law"] is not None:
            law, _ = law_from_dict(data["law"], f"{path}.law")
        if data.get("doubled") is not None:
            dd = data["doubled"]
            try:
                doubled = DoubledSpec(float(dd["sigma"]), float(dd["delta"]))
            except KeyError as exc:
                raise ConfigurationError(f"{path}.doubled: missing {exc}") from None
        dels = []
        for k, item in enumerate(data.get("deleted_sites", [])):
            if doubled is not None:
                if not isinstance(item, dict) or "site" not in item or "layer" not in item:
                    raise ConfigurationError(f"{path}.deleted_sites[{k}]: expected {{site, layer}}")
                if item["layer"] not in (1, 2):
                    raise ConfigurationError(f"{path}.deleted_sites[{k}].layer: must be 1 or 2")
                dels.append(_site_key(item["site"], item["layer"]))
            else:
                dels.append(_site_key(item))
        ins = tuple(tuple(float(v) for v in p) for p in data.get("inserted_points", []))
        return cls(law, frozenset(dels), ins, doubled)


def delete_sites(spec: ProcessSpec, sites: Iterable) -> ProcessSpec:
    """The same process with the given sites (or ``(site, layer)`` pairs) removed."""
    if spec.doubled is not None:
        new = {_site_key(s, layer) for s, layer in sites}
    else:
        new = {_site_key(s) for s in sites}
    return replace(spec, deleted_sites=spec.deleted_sites | frozenset(new))


def with_inserted(spec: ProcessSpec, points) -> ProcessSpec:
    pts = tuple(tuple(float(v) for v in p) for p in points)
    return replace(spec, inserted_points=spec.inserted_points + pts)


@dataclass(frozen=True, eq=False)
class PointConfiguration:
    """Points inside a window.  ``sites``/``layers`` are absent once blinded.

    ``layers`` is 0 for ordinary points, 1 or 2 for the two points of a
    doubled site and -1 for inserted points.
    """

    points: np.ndarray
    sites: np.ndarray | None = None
    layers: np.ndarray | None = None
    window: Window | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ConfigurationError("points must have shape (n, d)")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        for name in ("sites", "layers"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v)
                v.flags.writeable = False
                object.__setattr__(self, name, v)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def blinded(self) -> bool:
        return self.sites is None and self.layers is None

    def blind(self) -> "PointConfiguration":
        return PointConfiguration(self.points, None, None, self.window)

    def to_jsonl(self, path, blinded: bool = False) -> None:
        with open(path, "w") as fh:
            for k in range(len(self)):
                rec: dict = {"coords": [float(v) for v in self.points[k]]}
                if not blinded and self.sites is not None:
                    rec["site"] = [int(v) for v in self.sites[k]]
                    rec["layer"] = int(self.layers[k])
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path, window: Window | None = None) -> "PointConfiguration":
        coords, sites, layers = [], [], []
        with open(path) as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if "coords" not in rec:
                    raise ConfigurationError(f"{path}:{line_no}: missing coords")
                coords.append(rec["coords"])
                sites.append(rec.get("site"))
                layers.append(rec.get("layer"))
        pts = np.asarray(coords, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, window.d if window else 1)
        if coords and all(s is not None for s in sites):
            return cls(pts, np.asarray(sites, dtype=np.int64), np.asarray(layers, dtype=np.int8), window)
        return cls(pts, None, None, window)


def _finalize(points, sites, layers, spec: ProcessSpec, window: Window) -> PointConfiguration:
    keep = window.contains(points)
    points, sites, layers = points[keep], sites[keep], layers[keep]
    if spec.inserted_points:
        ins = np.asarray(spec.inserted_points, dtype=np.float64)
        if ins.shape[1] != window.d:
            raise ConfigurationError("inserted points have the wrong dimension")
        if not np.all(window.contains(ins)):
            raise ConfigurationError("inserted points must lie inside the window")
        points = np.vstack([points, ins])
        sites = np.vstack([sites, np.zeros((len(ins), window.d), dtype=np.int64)])
        layers = np.concatenate([layers, np.full(len(ins), INSERTED, dtype=np.int8)])
    return PointConfiguration(points, sites, layers, window)


def _check_budget(window: Window, per_site: int = 1) -> None:
    if window.site_count * per_site > SITE_BUDGET:
        raise ResourceError(f"window needs {window.site_count * per_site} sites, budget is {SITE_BUDGET}")


def realize(spec: ProcessSpec, window: Window, rng: SiteRandomness) -> PointConfiguration:
    """Points of the process inside the window.

    Deletions remove sites without touching the randomness of any other site,
    so realizations with and without deletions share all remaining points.
    """
    if spec.doubled is not None:
        dels = [(s, layer) for s, layer in spec.deleted_sites]
        return realize_doubled(spec.doubled, window, rng, dels, spec.inserted_points)
    law = spec.law
    if law.dim != window.d:
        raise ConfigurationError(f"law dimension {law.dim} does not match window dimension {window.d}")
    _check_budget(window)
    sites = window.sites()
    if spec.deleted_sites:
        idx = window.site_index(np.array(sorted(spec.deleted_sites), dtype=np.int64))
        mask = np.ones(len(sites), dtype=bool)
        mask[idx[idx >= 0]] = False
        sites = sites[mask]
    points = sites + sample_sites(law, sites, rng)
    layers = np.zeros(len(sites), dtype=np.int8)
    return _finalize(points, sites, layers, spec, window)


def realize_doubled(doubled: DoubledSpec, window: Window, rng: SiteRandomness,
                    deleted=(), inserted=()) -> PointConfiguration:
    """Two correlated Gaussian points per site; ``deleted`` holds ``(site, layer)`` pairs.

    Streams ``s``, ``s+1``, ``s+2`` of ``rng`` carry the shared and the two
    private displacements.
    """
    d = window.d
    _check_budget(window, 2)
    sites = window.sites()
    common = PerturbationLaw.gaussian(doubled.common_sigma, dim=d)
    private = PerturbationLaw.gaussian(doubled.delta, dim=d)
    base = sites + sample_sites(common, sites, rng)
    p1 = base + sample_sites(private, sites, rng.with_stream(rng.stream_id + 1))
    p2 = base + sample_sites(private, sites, rng.with_stream(rng.stream_id + 2))
    n = len(sites)
    points = np.stack([p1, p2], axis=1).reshape(2 * n, d)
    all_sites = np.repeat(sites, 2, axis=0)
    layers = np.tile(np.array([FIRST, SECOND], dtype=np.int8), n)
    if deleted:
        mask = np.ones(2 * n, dtype=bool)
        for s, layer in deleted:
            k = window.site_index(np.asarray(s, dtype=np.int64)[None, :])[0]
            if k >= 0:
                mask[2 * k + (int(layer) - 1)] = False
        points, all_sites, layers = points[mask], all_sites[mask], layers[mask]
    spec = ProcessSpec(None, frozenset(), tuple(tuple(p) for p in inserted), doubled)
    return _finalize(points, all_sites, layers, spec, window)


def insert_uniform(config: PointConfiguration, lo, hi, k: int, gen: np.random.Generator) -> PointConfiguration:
    """Add ``k`` independent uniform points in the box ``[lo, hi]``."""
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    if lo.shape != (config.d,) or hi.shape != (config.d,):
        raise ConfigurationError("insertion box has the wrong dimension")
    if np.any(hi <= lo):
        raise ConfigurationError("insertion box has zero volume")
    if k < 0:
        raise ConfigurationError("k must be non-negative")
    if config.window is not None and not (np.all(config.window.contains(lo)) and np.all(config.window.contains(hi))):
        raise ConfigurationError("insertion box must lie inside the window")
    if k == 0:
        return config
    new = lo + (hi - lo) * gen.random((k, config.d))
    points = np.vstack([config.points, new])
    if config.blinded:
        return PointConfiguration(points, None, None, config.window)
    sites = np.vstack([config.sites, np.zeros((k, config.d), dtype=np.int64)])
    layers = np.concatenate([config.layers, np.full(k, INSERTED, dtype=np.int8)])
    return PointConfiguration(points, sites, layers, config.window)
