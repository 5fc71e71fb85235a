import itertools

import numpy as np
import pytest

from latticelab.errors import ConfigurationError
from latticelab.greedy import (WeightField, chain_displacement_statistic, growth_per_step, growth_rate_estimate,
                               max_oriented_path_sum, nn_path_sum_heuristic, oriented_maxima, site_assignment)
from latticelab.lattice import ProcessSpec, Window, delete_sites, realize
from latticelab.laws import PerturbationLaw
from latticelab.rng import SiteRandomness


def _field(d, radius, gen, integer=False):
    shape = (2 * radius + 1,) * d
    vals = gen.integers(0, 10, size=shape).astype(float) if integer else gen.exponential(size=shape)
    return WeightField(vals, radius)


def brute_oriented(field, n):
    d = field.d
    best = -np.inf
    for steps in itertools.product(range(d), repeat=n):
        pos = np.zeros(d, dtype=int)
        tot = field.at(pos)[0]
        for s in steps:
            pos[s] += 1
            tot += field.at(pos)[0]
        best = max(best, tot)
    return best


def brute_nn(field, n):
    d = field.d
    moves = [tuple(int(v) for v in r) for r in np.concatenate([np.eye(d, dtype=int), -np.eye(d, dtype=int)])]
    best = -np.inf

    def walk(pos, k, seen, tot):
        nonlocal best
        if k == n:
            best = max(best, tot)
            return
        for m in moves:
            nxt = tuple(a + b for a, b in zip(pos, m))
            add = 0.0 if nxt in seen else field.at(nxt)[0]
            walk(nxt, k + 1, seen | {nxt}, tot + add)

    origin = tuple([0] * d)
    walk(origin, 0, {origin}, field.at(origin)[0])
    return best


def test_constant_fields():
    f0 = WeightField(np.zeros((9, 9)), 4)
    f1 = WeightField(np.ones((9, 9)), 4)
    assert max_oriented_path_sum(f0, 4).value == 0
    assert max_oriented_path_sum(f1, 4).value == 5
    assert nn_path_sum_heuristic(f1.scaled(2.5), 4).value == pytest.approx(12.5)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_dp_against_enumeration(d):
    gen = np.random.default_rng(d)
    for n in range(1, 7 if d == 3 else 9):
        for _ in range(5):
            f = _field(d, n, gen, integer=True)
            rep = max_oriented_path_sum(f, n)
            assert rep.value == brute_oriented(f, n)
            assert f.at(rep.witness).sum() == rep.value


def test_dp_ties_go_to_lowest_index():
    f = WeightField(np.ones((7, 7)), 3)
    rep = max_oriented_path_sum(f, 3)
    np.testing.assert_array_equal(rep.witness[-1], [3, 0])


def test_forward_maxima_match_backward():
    gen = np.random.default_rng(5)
    f = _field(3, 7, gen)
    levels = oriented_maxima(f, 7)
    for k in range(8):
        assert levels[k] == pytest.approx(max_oriented_path_sum(f, k).value)


def test_homogeneity_and_monotonicity():
    gen = np.random.default_rng(6)
    f = _field(2, 6, gen)
    v = max_oriented_path_sum(f, 6).value
    assert max_oriented_path_sum(f.scaled(0.5), 6).value == pytest.approx(v / 2, rel=1e-15)
    bumped = f.values.copy()
    bumped[7, 8] += 3.0
    assert max_oriented_path_sum(WeightField(bumped, 6), 6).value >= v


def test_length_beyond_field_is_rejected():
    with pytest.raises(ConfigurationError):
        max_oriented_path_sum(WeightField(np.ones((5, 5)), 2), 3)


def test_nn_heuristic_bounds():
    gen = np.random.default_rng(7)
    hits = 0
    for _ in range(20):
        f = _field(2, 6, gen)
        h = nn_path_sum_heuristic(f, 6, gen=np.random.default_rng(0)).value
        exact = brute_nn(f, 6)
        assert max_oriented_path_sum(f, 6).value <= h + 1e-12
        assert h <= exact + 1e-9
        hits += abs(h - exact) < 1e-9
    assert hits >= 19


def test_growth_scales_exactly_with_sigma():
    a = growth_per_step(PerturbationLaw.gaussian(1.0, dim=2), [4, 8], SiteRandomness(3))
    b = growth_per_step(PerturbationLaw.gaussian(1.0, dim=2, scale=0.5), [4, 8], SiteRandomness(3))
    np.testing.assert_allclose(b, a / 2, rtol=1e-14)


def test_growth_verdicts_at_extreme_sigma():
    lo = growth_rate_estimate(PerturbationLaw.gaussian(0.01, dim=3), [4, 8, 16], 30, seed=1)
    hi = growth_rate_estimate(PerturbationLaw.gaussian(10.0, dim=3), [4, 8, 16], 30, seed=1)
    assert lo.verdict == "< 1/2" and hi.verdict == ">= 1/2"
    assert lo.threshold_epsilon > 1 > hi.threshold_epsilon


def test_assignment_is_identity_for_tiny_noise():
    w = Window(2, 5, 2)
    c = realize(ProcessSpec(PerturbationLaw.gaussian(1e-3, dim=2)), w, SiteRandomness(0))
    sites, match, failed = site_assignment(c.blind(), 5)
    assert failed == 0
    np.testing.assert_allclose(c.points[match], sites, atol=0.01)


def test_chain_statistic_rejects_unblinded():
    w = Window(2, 4, 2)
    c = realize(ProcessSpec(PerturbationLaw.gaussian(0.05, dim=2)), w, SiteRandomness(0))
    with pytest.raises(ConfigurationError):
        chain_displacement_statistic(c, 10)


def test_chain_separates_intact_from_deleted():
    law = PerturbationLaw.gaussian(0.05, dim=2)
    w = Window.for_law(law, 12)
    spec = ProcessSpec(law)
    for s in range(10):
        rng = SiteRandomness(s)
        intact = chain_displacement_statistic(realize(spec, w, rng).blind(), 100)
        holed = chain_displacement_statistic(realize(delete_sites(spec, [(0, 0)]), w, rng).blind(), 100)
        assert intact.value < 0.5 < holed.value
        assert intact.feasible
