import math

import numpy as np
import pytest
from scipy import integrate, stats

from latticelab.errors import ConfigurationError
from latticelab.laws import (PerturbationLaw, chi_square_factor, density, density_eval, density_ratio, draw,
                             law_from_dict, margin_for, pair_product_factor, power_tail_constant, sample,
                             sample_sites, tail_probability)
from latticelab.rng import SiteRandomness


def _ks(sample_, cdf):
    return stats.kstest(sample_, cdf).pvalue


def test_gaussian_draws_match_normal():
    law = PerturbationLaw.gaussian(1.7, dim=2)
    y = sample_sites(law, np.array([[i, j] for i in range(100) for j in range(100)]), SiteRandomness(1))
    for k in range(2):
        assert _ks(y[:, k], stats.norm(scale=1.7).cdf) > 1e-3


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5])
def test_stable_draws_match_scipy(alpha):
    law = PerturbationLaw.stable(alpha, scale=2.0)
    y = draw(law, 20000, np.random.default_rng(3))[:, 0]
    assert _ks(y, stats.levy_stable(alpha, 0.0, scale=2.0).cdf) > 1e-3


@pytest.mark.parametrize("d,a", [(1, 1.5), (1, 3.0), (2, 3.5), (3, 4.5)])
def test_power_tail_radius_distribution(d, a):
    law = PerturbationLaw.power_tail(a, dim=d)
    r = np.linalg.norm(draw(law, 20000, np.random.default_rng(4)), axis=1)
    c = power_tail_constant(d, a) * 2 * math.pi ** (d / 2) / math.gamma(d / 2)

    def cdf(t):
        t = np.asarray(t, dtype=float)
        inner = c * np.minimum(t, 1.0) ** d / d
        outer = np.where(t > 1, c * (1 - np.maximum(t, 1.0) ** (d - a)) / (a - d), 0.0)
        return inner + outer

    assert abs(cdf(1e40) - 1) < 1e-9
    assert _ks(r, cdf) > 1e-3


def test_power_tail_density_integrates_to_one():
    law = PerturbationLaw.power_tail(1.8, dim=1)
    f = lambda y: density(law, y)[()]
    total = integrate.quad(f, -1, 1)[0] + 2 * integrate.quad(f, 1, np.inf, limit=200)[0]
    assert abs(total - 1) < 1e-6


@pytest.mark.parametrize("alpha", [0.7, 1.3, 1.8])
def test_stable_density_against_scipy(alpha):
    law = PerturbationLaw.stable(alpha, scale=1.5)
    ys = np.array([0.0, 0.3, 2.0, 7.5])
    ev = density_eval(law, ys)
    assert ev.accurate
    np.testing.assert_allclose(ev.value, stats.levy_stable.pdf(ys, alpha, 0.0, scale=1.5), rtol=2e-4)


def test_cauchy_density_and_ratio_closed_form():
    law = PerturbationLaw.stable(1.0)
    assert density(law, 0.0) == pytest.approx(1 / math.pi)
    assert density_ratio(law, 0.0, 0) == pytest.approx(0.5)


def test_gaussian_density_ratio_examples():
    law = PerturbationLaw.gaussian(1.0)
    assert density_ratio(law, -0.5, 0) == pytest.approx(1.0)
    assert density_ratio(law, 0.0, 0) == pytest.approx(math.exp(-0.5))
    law2 = PerturbationLaw.gaussian(2.0, dim=3)
    y = np.array([0.3, -1.0, 2.0])
    direct = density(law2, y + np.array([0, 1.0, 0])) / density(law2, y)
    assert density_ratio(law2, y, 1) == pytest.approx(direct)


def test_density_ratio_generic_matches_density_quotient():
    law = PerturbationLaw.power_tail(3.0, dim=2, scale=0.7)
    y = np.random.default_rng(0).normal(size=(20, 2))
    shifted = y + np.array([1.0, 0.0])
    np.testing.assert_allclose(density_ratio(law, y, 0), density(law, shifted) / density(law, y))


def test_chi_square_gaussian_closed_form_and_mc():
    law = PerturbationLaw.gaussian(1.5)
    cf = chi_square_factor(law)
    assert cf.closed_form and cf.value == pytest.approx(math.exp(1 / 2.25))
    mc = chi_square_factor(law, mc_budget=200_000, gen=np.random.default_rng(1), closed_form=False)
    assert abs(mc.value - cf.value) < 5 * mc.std_error
    assert pair_product_factor(law, 0, 1).value == 1.0


def test_chi_square_flags_divergence_for_tiny_sigma():
    law = PerturbationLaw.gaussian(0.2)
    est = chi_square_factor(law, mc_budget=200_000, gen=np.random.default_rng(2), closed_form=False)
    assert est.divergent


def test_tail_probability_and_margin():
    law = PerturbationLaw.gaussian(1.0)
    assert tail_probability(law, 2.0) == pytest.approx(2 * stats.norm.sf(2.0))
    m = margin_for(law)
    assert tail_probability(law, m + 0.5) <= 1e-6 < tail_probability(law, m - 0.5)
    cauchy = PerturbationLaw.stable(1.0)
    assert tail_probability(cauchy, 3.0) == pytest.approx(2 * stats.cauchy.sf(3.0))
    assert margin_for(cauchy, limit=1000) == 1001


def test_site_sampling_is_reproducible():
    law = PerturbationLaw.stable(1.5)
    rng = SiteRandomness(9)
    a = sample(law, 4, rng)
    b = sample_sites(law, np.array([[3], [4]]), rng)[1]
    np.testing.assert_array_equal(a, b)


def test_serialization_round_trip_and_errors():
    law = PerturbationLaw.power_tail(2.5, dim=2, scale=0.5)
    rng = SiteRandomness(11, 2)
    back, back_rng = law_from_dict(law.to_dict(rng))
    assert back == law and back_rng == rng
    with pytest.raises(ConfigurationError, match="alpha_exponent"):
        PerturbationLaw.power_tail(1.5, dim=2)
    with pytest.raises(ConfigurationError, match="law"):
        law_from_dict({"kind": "gaussian", "sigma": 1.0, "colour": 3})
    with pytest.raises(ConfigurationError):
        PerturbationLaw.gaussian(-1.0)
