import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from curesem.distributions import DomainError, NegBinParams, negbin_pmf, negbin_tail_cutoff
from curesem.model import (
    CureData,
    Covariates,
    Observation,
    Params,
    cure_rate,
    eta,
    population_density,
    population_survival,
    weibull_terms,
)

X = np.array([1.0, 2.0])


def params(phi=3.0, beta=(-1.185, 1.057), alpha=(-1.5, 0.5), gamma1=0.3):
    return Params(phi=phi, alpha=alpha, beta=beta, gamma1=gamma1)


class TestLinks:
    def test_zero_coefficients(self):
        assert eta([1.0, 3.0], [0.0, 0.0]) == 1.0

    def test_high_cure_group2(self):
        assert eta([1, 2], [-1.185, 1.057]) == pytest.approx(math.exp(0.929), rel=1e-12)
        assert eta([1, 2], [-1.185, 1.057]) == pytest.approx(2.532, abs=5e-4)

    def test_low_cure_group4(self):
        assert eta([1, 4], [0.582, 1.002]) == pytest.approx(math.exp(0.582 + 4 * 1.002), rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            eta([1.0, 2.0, 3.0], [0.1, 0.2])


class TestCureRate:
    def test_geometric(self):
        assert cure_rate(1.0, 1.0) == pytest.approx(0.5, abs=1e-15)

    def test_table_anchors(self):
        assert cure_rate(3.0, math.exp(-1.185 + 2 * 1.057)) == pytest.approx(0.488, abs=5e-4)
        assert cure_rate(1.5, math.exp(-1.182 + 4 * 0.681)) == pytest.approx(0.250, abs=5e-4)

    @pytest.mark.parametrize("phi", [0.01, 0.5, 1.5, 3.0, 20.0])
    def test_strictly_decreasing_in_eta(self, phi):
        etas = np.geomspace(1e-3, 1e3, 200)
        assert np.all(np.diff(cure_rate(phi, etas)) < 0)

    def test_poisson_limit(self):
        assert cure_rate(1e-9, 2.0) == pytest.approx(math.exp(-2.0), rel=1e-7)


class TestPopulationSurvival:
    def test_starts_at_one(self):
        assert population_survival(0.0, params(), X, X) == 1.0

    def test_plateau(self):
        p = params()
        assert population_survival(1e6, p, X, X) == pytest.approx(cure_rate(3.0, eta(X, p.beta)), rel=1e-12)

    def test_geometric_closed_form(self):
        p = params(phi=1.0)
        t = np.linspace(0.01, 5.0, 30)
        gamma2 = math.exp(X @ p.alpha)
        f_cdf = weibull_terms(t, p.gamma1, gamma2)[0]
        et = eta(X, p.beta)
        np.testing.assert_allclose(population_survival(t, p, X, X), 1 / (1 + et * f_cdf), atol=1e-12)

    def test_negative_time(self):
        with pytest.raises(DomainError):
            population_survival(-1.0, params(), X, X)

    def test_precomputed_gamma2_consistency(self):
        # evaluating S_p from (x, alpha) must equal the same formula with gamma2 supplied directly
        p = params()
        t = np.linspace(0.1, 4.0, 11)
        gamma2 = np.exp(X @ p.alpha)
        f_cdf = weibull_terms(t, p.gamma1, gamma2)[0]
        direct = np.exp(-np.log1p(p.phi * eta(X, p.beta) * f_cdf) / p.phi)
        np.testing.assert_array_equal(population_survival(t, p, X, X), direct)

    @settings(max_examples=40, deadline=None)
    @given(
        phi=st.floats(0.05, 8.0),
        b0=st.floats(-2.0, 1.5),
        g1=st.floats(0.2, 2.0),
        t=st.floats(0.01, 8.0),
    )
    def test_pgf_identity(self, phi, b0, g1, t):
        p = params(phi=phi, beta=(b0, 0.2), gamma1=g1)
        et = float(eta(X, p.beta))
        nb = NegBinParams(1 / phi, 1 / (1 + phi * et))
        m = np.arange(negbin_tail_cutoff(nb) + 1)
        s = weibull_terms(t, g1, math.exp(X @ p.alpha))[1]
        series = math.fsum(s**m * negbin_pmf(m, nb))
        assert population_survival(t, p, X, X) == pytest.approx(series, abs=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(phi=st.floats(0.05, 8.0), b0=st.floats(-2.0, 1.5), g1=st.floats(0.2, 2.0))
    def test_monotone_and_bounded(self, phi, b0, g1):
        p = params(phi=phi, beta=(b0, 0.2), gamma1=g1)
        grid = np.linspace(0.0, 30.0, 300)
        s = population_survival(grid, p, X, X)
        p0 = cure_rate(phi, eta(X, p.beta))
        assert np.all(np.diff(s) <= 1e-15)
        assert np.all(s <= 1.0) and np.all(s >= p0 - 1e-12)


class TestPopulationDensity:
    def test_vanishes_at_origin(self):
        # gamma1 < 1 means Weibull shape > 1, so f(0+) = 0
        assert population_density(1e-12, params(), X, X) < 1e-20

    def test_minus_survival_derivative(self):
        p = params()
        for t in (0.3, 1.0, 2.5, 6.0):
            h = 1e-5 * t
            fd = -(population_survival(t + h, p, X, X) - population_survival(t - h, p, X, X)) / (2 * h)
            assert population_density(t, p, X, X) == pytest.approx(fd, abs=1e-6)

    @pytest.mark.parametrize("phi,beta,gamma1", [(3.0, (-1.185, 1.057), 0.3), (1.5, (0.11, 0.568), 0.8),
                                                 (0.5, (0.0, 0.0), 1.2)])
    def test_improper_mass(self, phi, beta, gamma1):
        p = params(phi=phi, beta=beta, gamma1=gamma1)
        mass, _ = integrate.quad(lambda t: population_density(t, p, X, X), 0, np.inf, limit=400,
                                 epsabs=1e-12, epsrel=1e-10)
        assert mass == pytest.approx(1 - cure_rate(phi, eta(X, p.beta)), abs=1e-6)

    def test_nonnegative(self):
        t = np.geomspace(1e-6, 1e3, 400)
        assert np.all(population_density(t, params(), X, X) >= 0)

    def test_requires_positive_time(self):
        with pytest.raises(DomainError):
            population_density(0.0, params(), X, X)


class TestDomainTypes:
    def test_params_invariants(self):
        with pytest.raises(DomainError):
            Params(phi=0.0, alpha=[0, 0], beta=[0, 0], gamma1=1.0)
        with pytest.raises(DomainError):
            Params(phi=1.0, alpha=[0, 0], beta=[0, 0], gamma1=-1.0)

    def test_vector_round_trip(self):
        p = params()
        q = Params.from_vector(p.to_vector(), 2)
        np.testing.assert_array_equal(q.to_vector(), p.to_vector())
        assert p.names() == ["phi", "alpha0", "alpha1", "beta0", "beta1", "gamma1"]

    def test_observation_invariants(self):
        cov = Covariates([1.0, 1.0], [1.0, 1.0])
        with pytest.raises(DomainError):
            Observation(0.0, 1, cov)
        with pytest.raises(DomainError):
            Observation(1.0, 2, cov)
        with pytest.raises(DomainError):
            Covariates([1.0, np.inf], [1.0])

    def test_data_round_trip(self):
        obs = [Observation(1.0 + i, i % 2, Covariates([1.0, i], [1.0, i])) for i in range(5)]
        data = CureData.from_observations(obs)
        assert len(data) == 5
        assert [o.t for o in data.observations()] == [o.t for o in obs]

    def test_dimension_check(self):
        data = CureData([1.0], [1], [[1.0, 2.0]], [[1.0, 2.0]])
        with pytest.raises(ValueError):
            data.check_params(Params(1.0, [0.0], [0.0, 0.0], 1.0))
