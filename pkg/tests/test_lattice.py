import json

import numpy as np
import pytest
from scipy import stats

from latticelab.errors import ConfigurationError, ResourceError
from latticelab.lattice import (DoubledSpec, PointConfiguration, ProcessSpec, Window, delete_sites, insert_uniform,
                                realize, with_inserted)
from latticelab.laws import PerturbationLaw, tail_probability
from latticelab.rng import SiteRandomness


def _as_set(config):
    return {tuple(p) for p in config.points}


def test_vanishing_perturbation_reproduces_lattice():
    w = Window(2, 5, 1)
    c = realize(ProcessSpec(PerturbationLaw.gaussian(1e-6, dim=2)), w, SiteRandomness(0))
    assert len(c) == 11**2
    assert np.max(np.abs(c.points - c.sites)) < 1e-4


def test_deletion_removes_exactly_the_deleted_points():
    law = PerturbationLaw.gaussian(0.8, dim=2)
    spec = ProcessSpec(law)
    w = Window.for_law(law, 6)
    rng = SiteRandomness(4)
    full = realize(spec, w, rng)
    S = [(0, 0), (3, -2), (20, 20)]
    cut = realize(delete_sites(spec, S), w, rng)
    gone = _as_set(full) - _as_set(cut)
    assert _as_set(cut) <= _as_set(full)
    retained = {tuple(s) for s, p in zip(full.sites, full.points) if tuple(s) in set(S)}
    assert len(gone) == len(retained) == len(full) - len(cut)


def test_delete_sites_is_set_union():
    spec = ProcessSpec(PerturbationLaw.gaussian(1.0, dim=2))
    assert delete_sites(spec, []) == spec
    assert delete_sites(delete_sites(spec, [(0, 0)]), [(1, 0)]) == delete_sites(spec, [(0, 0), (1, 0)])


def test_realize_is_deterministic_and_seed_sensitive():
    spec = ProcessSpec(PerturbationLaw.stable(1.5))
    w = Window(1, 50, 20)
    a = realize(spec, w, SiteRandomness(1))
    b = realize(spec, w, SiteRandomness(1))
    c = realize(spec, w, SiteRandomness(2))
    np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(a.points[:5], c.points[:5])


def test_points_stay_in_window_and_sites_in_site_box():
    law = PerturbationLaw.stable(1.0)
    w = Window(1, 30, 30)
    c = realize(ProcessSpec(law), w, SiteRandomness(3))
    assert np.all(np.abs(c.points) <= w.half_width)
    assert np.all(np.abs(c.sites) <= w.extent)


def test_cauchy_escapes_match_tail_sum():
    law = PerturbationLaw.stable(1.0)
    R = 1000
    w = Window(1, R, 0)
    x = np.arange(-R, R + 1)
    expected = np.sum(stats.cauchy.sf(R + 0.5 - x) + stats.cauchy.cdf(-R - 0.5 - x))
    counts = [(2 * R + 1) - len(realize(ProcessSpec(law), w, SiteRandomness(s))) for s in range(300)]
    se = np.std(counts, ddof=1) / np.sqrt(len(counts))
    assert abs(np.mean(counts) - expected) < 4 * se


def test_gaussian_margin_keeps_boundary_loss_small():
    law = PerturbationLaw.gaussian(1.0)
    w = Window.for_law(law, 100)
    # expected number of points from beyond the margin that would land inside
    lost = 2 * sum(tail_probability(law, k + 0.5) / 2 for k in range(w.margin, w.margin + 200))
    assert lost < 1e-2


def test_site_budget_raises_resource_error():
    with pytest.raises(ResourceError):
        realize(ProcessSpec(PerturbationLaw.gaussian(1.0, dim=3)), Window(3, 200, 0), SiteRandomness(0))
    with pytest.raises(ResourceError):
        Window.for_law(PerturbationLaw.power_tail(3.5, dim=3), 10)


def test_inserted_points_are_appended():
    spec = with_inserted(ProcessSpec(PerturbationLaw.gaussian(0.3)), [(0.25,)])
    c = realize(spec, Window(1, 3, 3), SiteRandomness(0))
    assert c.points[-1, 0] == 0.25 and c.layers[-1] == -1


def test_insert_uniform_counts_and_center():
    w = Window(2, 4, 0)
    base = realize(ProcessSpec(PerturbationLaw.gaussian(0.1, dim=2)), w, SiteRandomness(0))
    gen = np.random.default_rng(0)
    assert insert_uniform(base, [-1, -1], [1, 2], 0, gen) is base
    three = insert_uniform(base, [-1, -1], [1, 2], 3, gen)
    assert len(three) == len(base) + 3
    means = np.array([insert_uniform(base, [-1, -1], [1, 2], 1, gen).points[-1] for _ in range(10000)])
    se = means.std(axis=0, ddof=1) / 100
    assert np.all(np.abs(means.mean(axis=0) - [0.0, 0.5]) < 4 * se)
    with pytest.raises(ConfigurationError):
        insert_uniform(base, [0, 0], [0, 1], 1, gen)


def test_blinded_jsonl_has_no_provenance(tmp_path):
    c = realize(ProcessSpec(PerturbationLaw.gaussian(0.5, dim=2)), Window(2, 3, 3), SiteRandomness(1))
    path = tmp_path / "pts.jsonl"
    c.to_jsonl(path, blinded=True)
    text = path.read_text()
    assert "site" not in text and "layer" not in text
    back = PointConfiguration.from_jsonl(path)
    assert back.blinded
    np.testing.assert_array_equal(back.points, c.points)
    full = tmp_path / "full.jsonl"
    c.to_jsonl(full)
    again = PointConfiguration.from_jsonl(full)
    np.testing.assert_array_equal(again.sites, c.sites)
    assert json.loads(full.read_text().splitlines()[0]).keys() == {"coords", "site", "layer"}


def test_doubled_degenerate_delta_and_variances():
    w = Window(2, 40, 0)
    tight = realize(ProcessSpec(None, doubled=DoubledSpec(1.0, 1e-8)), Window(2, 3, 6), SiteRandomness(0))
    by_site = {}
    for s, layer, p in zip(tight.sites, tight.layers, tight.points):
        by_site.setdefault(tuple(s), {})[int(layer)] = p
    pairs = [v for v in by_site.values() if len(v) == 2]
    assert pairs and max(np.max(np.abs(v[1] - v[2])) for v in pairs) < 1e-6

    spec = ProcessSpec(None, doubled=DoubledSpec(1.0, 0.3))
    c = realize(spec, Window(2, 60, 0), SiteRandomness(2))
    sites = {}
    for s, layer, p in zip(c.sites, c.layers, c.points):
        sites.setdefault(tuple(s), {})[int(layer)] = p - np.array(s)
    both = np.array([[v[1], v[2]] for v in sites.values() if len(v) == 2])
    diff_var = np.var(both[:, 0] - both[:, 1], axis=0)
    np.testing.assert_allclose(diff_var, 2 * 0.09, rtol=0.08)
    np.testing.assert_allclose(np.var(both[:, 0], axis=0), 1.0, rtol=0.08)


def test_doubled_layers_exchangeable():
    spec = ProcessSpec(None, doubled=DoubledSpec(1.0, 0.2))
    c = realize(spec, Window(1, 3000, 6), SiteRandomness(5))
    off = (c.points - c.sites)[:, 0]
    assert stats.ks_2samp(off[c.layers == 1], off[c.layers == 2]).pvalue > 0.01


def test_doubled_deletion_and_validation():
    spec = ProcessSpec(None, doubled=DoubledSpec(2.0, 0.5))
    w = Window(2, 4, 10)
    full = realize(spec, w, SiteRandomness(0))
    one = realize(delete_sites(spec, [((0, 0), 1)]), w, SiteRandomness(0))
    assert len(full) - len(one) == 1
    assert _as_set(full) - _as_set(one) == {tuple(full.points[(np.all(full.sites == 0, axis=1)) & (full.layers == 1)][0])}
    with pytest.raises(ConfigurationError):
        DoubledSpec(1.0, 1.0)
    with pytest.raises(ConfigurationError, match="layer"):
        ProcessSpec.from_dict({"doubled": {"sigma": 1, "delta": 0.1}, "deleted_sites": [{"site": [0], "layer": 3}]})


def test_process_spec_round_trip():
    spec = delete_sites(ProcessSpec(PerturbationLaw.gaussian(0.5, dim=2)), [(0, 0), (1, 2)])
    assert ProcessSpec.from_dict(spec.to_dict()) == spec
    dspec = delete_sites(ProcessSpec(None, doubled=DoubledSpec(3.0, 0.05)), [((0, 0, 0), 1)])
    assert ProcessSpec.from_dict(dspec.to_dict()) == dspec
