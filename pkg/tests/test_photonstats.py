import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from twinsipm import photonstats as ps
from twinsipm.errors import DomainError, EstimationError, UndefinedEstimateError

ANCHOR_MEAN, ANCHOR_MODES, ANCHOR_ETA = 2.52, 2000.0, 0.109


def nbinom_oracle(mean, modes, n):
    return stats.nbinom.pmf(n, modes, modes / (modes + mean))


def conditional_oracle(mean_n, modes, eta_s, eta_i, m_cond, n_max=400):
    """Brute-force joint law P(m1, m2) summed over the shared photon number."""
    n = np.arange(n_max)
    prior = nbinom_oracle(mean_n, modes, n)
    m = np.arange(n_max)
    joint = np.einsum("n,n,nm->m", prior, stats.binom.pmf(m_cond, n, eta_s),
                      stats.binom.pmf(m[None, :], n[:, None], eta_i))
    return joint / joint.sum()


# --------------------------------------------------------------------------
# multithermal law

def test_pmf_single_mode_vacuum():
    assert ps.multithermal_pmf(1.0, 1.0, 0) == pytest.approx(0.5, rel=1e-14)


def test_pmf_closed_form_at_zero():
    assert ps.multithermal_pmf(2.52, 100, 0) == pytest.approx(1.0252 ** -100, rel=1e-12)


def test_pmf_moments_at_anchor():
    n = np.arange(200)
    mean, var = ps.pmf_moments(ps.multithermal_pmf(ANCHOR_MEAN, ANCHOR_MODES, n))
    assert mean == pytest.approx(2.52, rel=1e-12)
    assert var / mean == pytest.approx(1.00126, abs=1e-12)


def test_pmf_zero_mean_is_vacuum():
    p = ps.multithermal_pmf(0.0, 7, np.arange(5))
    assert list(p) == [1.0, 0, 0, 0, 0]


@settings(max_examples=60, deadline=None)
@given(mean=st.floats(0.01, 50), modes=st.floats(1, 5000))
def test_pmf_matches_negative_binomial(mean, modes):
    n = np.arange(0, 400)
    p = ps.multithermal_pmf(mean, modes, n)
    np.testing.assert_allclose(p, nbinom_oracle(mean, modes, n), rtol=1e-9, atol=1e-300)
    nmax = ps.multithermal_nmax(mean, modes)
    assert ps.multithermal_pmf(mean, modes, np.arange(nmax + 1)).sum() > 1 - 2 * ps.TAIL_TOL


def test_sampler_zero_mean():
    assert np.all(ps.sample_multithermal(ps.TwbSourceParams(0.0, 5), 1, size=1000) == 0)


def test_sampler_anchor_moments():
    x = ps.sample_multithermal(ps.TwbSourceParams(ANCHOR_MEAN, ANCHOR_MODES), 11, size=100_000)
    sigma = math.sqrt(2.52 * 1.00126 / x.size)
    assert abs(x.mean() - 2.52) < 3 * sigma
    assert abs(x.var(ddof=1) / x.mean() - 1.00126) < 3 * math.sqrt((1 / 2.52 + 2) / x.size)


def test_sampler_single_mode_fano():
    x = ps.sample_multithermal(ps.TwbSourceParams(5.0, 1), 12, size=100_000)
    # single-mode thermal: F = 1 + mean; std error of F is about 0.06 here
    assert x.var(ddof=1) / x.mean() == pytest.approx(6.0, abs=0.25)


def test_twb_pairs_identical_and_nrf_zero():
    pairs = ps.sample_twb_pairs(ps.TwbSourceParams(4.0, 10), 100_000, 3)
    assert np.array_equal(pairs[:, 0], pairs[:, 1])
    assert ps.empirical_nrf(pairs, rng=0).value == 0.0
    pair = ps.sample_twb_pair(ps.TwbSourceParams(4.0, 10), 4)
    assert pair.n_s == pair.n_i


def test_twb_marginal_chi_square():
    pairs = ps.sample_twb_pairs(ps.TwbSourceParams(3.0, 4), 50_000, 5)
    k = np.arange(15)
    observed = np.bincount(np.minimum(pairs[:, 0], 14), minlength=15)
    expected = nbinom_oracle(3.0, 4, k)
    expected[-1] = 1 - expected[:-1].sum()
    assert stats.chisquare(observed, expected * len(pairs)).pvalue > 1e-3


def test_binomial_detection_limits():
    assert ps.apply_binomial_detection(7, 1.0, 0) == 7
    assert ps.apply_binomial_detection(7, 0.0, 0) == 0
    with pytest.raises(DomainError):
        ps.apply_binomial_detection(7, 1.5, 0)


def test_binomial_detection_thins_mean():
    n = ps.sample_multithermal(ps.TwbSourceParams(4.0, 10), 6, size=100_000)
    m = ps.apply_binomial_detection(n, 0.5, 7)
    # var(m) = 0.25 var(n) + 0.25 mean(n)
    sigma = math.sqrt((0.25 * 4 * 1.4 + 0.25 * 4) / n.size)
    assert abs(m.mean() - 2.0) < 4 * sigma


@settings(max_examples=50, deadline=None)
@given(n=st.integers(0, 1000), eta=st.floats(0, 1), seed=st.integers(0, 2**32 - 1))
def test_binomial_detection_bounds(n, eta, seed):
    m = ps.apply_binomial_detection(n, eta, seed)
    assert 0 <= m <= n


# --------------------------------------------------------------------------
# NRF and Fano estimators

def test_nrf_perfect_correlation():
    assert ps.empirical_nrf([(2, 2), (3, 3), (5, 5)], rng=0).value == 0.0


def test_nrf_hand_computation():
    assert ps.empirical_nrf([(1, 0), (0, 1)], rng=0).value == pytest.approx(2.0)


def test_nrf_undefined_and_too_short():
    with pytest.raises(UndefinedEstimateError):
        ps.empirical_nrf([(0, 0), (0, 0)], rng=0)
    with pytest.raises(DomainError):
        ps.empirical_nrf([(1, 1)], rng=0)


def test_nrf_independent_poisson():
    rng = np.random.default_rng(8)
    pairs = rng.poisson(3.0, size=(100_000, 2))
    est = ps.empirical_nrf(pairs, rng=9)
    assert abs(est.value - 1.0) < 3 * est.std_error
    # std error of var(d)/<m1+m2> for independent Poisson arms: sqrt((2 + 1/6)/N)
    assert est.std_error == pytest.approx(math.sqrt((2 + 1 / 6) / 100_000), rel=0.2)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30)), min_size=2, max_size=60))
def test_nrf_nonnegative_and_symmetric(rows):
    pairs = np.array(rows)
    if pairs.sum() == 0:
        return
    a = ps.empirical_nrf(pairs, n_resamples=50, rng=0).value
    b = ps.empirical_nrf(pairs[:, ::-1], n_resamples=50, rng=0).value
    assert a >= 0
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


def test_fano_factor_constant_and_poisson():
    s = ps.fano_factor([3, 3, 3, 3])
    assert s.fano == 0.0 and s.mean == 3.0
    x = np.random.default_rng(1).poisson(4.0, 100_000)
    assert abs(ps.fano_factor(x).fano - 1.0) < 3 * math.sqrt(2 / x.size)


def test_fano_factor_zero_mean_is_nan():
    s = ps.fano_factor([0, 0, 0])
    assert not s.fano_defined


def test_fano_std_error_matches_asymptotic():
    x = np.random.default_rng(2).poisson(4.0, 50_000)
    se = ps.fano_std_error(x, rng=3)
    # Poisson: var(F_hat) ~ (2 + 1/lambda) / N
    assert se == pytest.approx(math.sqrt((2 + 0.25) / x.size), rel=0.2)


def test_estimate_modes():
    assert ps.estimate_modes(ps.MomentSummary(10, 2.52, 2.52 * 1.00126, 1.00126)) == pytest.approx(2000.0, rel=1e-9)
    assert ps.estimate_modes(ps.MomentSummary(10, 1.0, 2.0, 2.0)) == 1.0
    with pytest.raises(EstimationError):
        ps.estimate_modes(ps.MomentSummary(10, 1.0, 1.0, 1.0))


def test_estimate_modes_round_trip():
    x = ps.sample_multithermal(ps.TwbSourceParams(3.0, 100), 4, size=1_000_000)
    assert ps.estimate_modes(ps.fano_factor(x)) == pytest.approx(100, rel=0.1)


def test_estimate_eta():
    assert ps.estimate_eta_from_nrf(0.8) == pytest.approx(0.2)
    assert ps.estimate_eta_from_nrf(1.0) == 0.0
    with pytest.raises(DomainError):
        ps.estimate_eta_from_nrf(1.2)


# --------------------------------------------------------------------------
# closed forms versus oracles

def test_theoretical_nrf_values():
    assert ps.theoretical_nrf(0.2, 0.2, 3, 3, 5, 5) == pytest.approx(0.8, abs=1e-15)
    # 1 - 2*sqrt(0.5*2*0.5*1)/3 + 1/(100*3)
    assert ps.theoretical_nrf(0.5, 0.5, 2, 1, 100, 100) == pytest.approx(0.5319288, abs=5e-8)


def test_theoretical_nrf_unbalanced_monte_carlo():
    rng = np.random.default_rng(21)
    src = ps.TwbSourceParams(10.0, 50)
    n = ps.sample_multithermal(src, rng, size=100_000)
    pairs = np.column_stack([rng.binomial(n, 0.15), rng.binomial(n, 0.25)])
    est = ps.empirical_nrf(pairs, rng=rng)
    theory = ps.theoretical_nrf(0.15, 0.25, 1.5, 2.5, 50, 50)
    assert abs(est.value - theory) < 3 * est.std_error


def test_conditional_fano_values():
    p = ps.ConditionalTheoryParams(5, ANCHOR_MEAN, ANCHOR_MODES, ANCHOR_ETA)
    assert ps.conditional_fano_theory(p) == pytest.approx(0.9796339876079495, rel=1e-12)
    assert ps.conditional_fano_theory(ps.ConditionalTheoryParams(5, 2.52, 2000, 1.0)) == 0.0
    zero_eta = ps.conditional_fano_theory(ps.ConditionalTheoryParams(5, 2.52, 2000, 0.0))
    assert zero_eta == pytest.approx(1 + 2.52 / (2.52 + 2000), rel=1e-14)


def test_conditional_fano_below_one_at_anchor():
    for k in range(1, 9):
        assert ps.conditional_fano_theory(ps.ConditionalTheoryParams(k, 2.52, 2000, 0.109)) < 1


def test_conditional_fano_can_exceed_one_for_few_modes():
    # with very few modes the heralded state stays super-Poissonian
    assert ps.conditional_fano_theory(ps.ConditionalTheoryParams(1, 2.52, 1.0, 0.109)) > 1


@pytest.mark.parametrize("m_cond", range(0, 9))
def test_conditional_pmf_matches_oracle(m_cond):
    src = ps.TwbSourceParams(ANCHOR_MEAN / ANCHOR_ETA, ANCHOR_MODES)
    pmf = ps.conditional_pmf_exact(src, ps.DetectionParams(ANCHOR_ETA, ANCHOR_ETA), m_cond)
    oracle = conditional_oracle(src.mean_photons, src.modes, ANCHOR_ETA, ANCHOR_ETA, m_cond)
    k = min(len(pmf), len(oracle))
    np.testing.assert_allclose(pmf[:k], oracle[:k], atol=1e-13)
    mean, var = ps.pmf_moments(pmf)
    eq3 = ps.conditional_fano_theory(ps.ConditionalTheoryParams(m_cond, 2.52, 2000, 0.109))
    assert var / mean == pytest.approx(eq3, rel=1e-9)


def test_conditional_pmf_anchor_mean():
    src = ps.TwbSourceParams(ANCHOR_MEAN / ANCHOR_ETA, ANCHOR_MODES)
    pmf = ps.conditional_pmf_exact(src, ps.DetectionParams(ANCHOR_ETA, ANCHOR_ETA), 5)
    assert ps.pmf_moments(pmf)[0] == pytest.approx(2.79310069312554, rel=1e-10)
    assert abs(ps.pmf_moments(pmf)[0] - 2.79) < 0.02


def test_conditional_pmf_perfect_detection_is_point_mass():
    pmf = ps.conditional_pmf_exact(ps.TwbSourceParams(4.0, 10), ps.DetectionParams(1.0, 1.0), 3)
    assert pmf[3] == pytest.approx(1.0)
    assert pmf.sum() == pytest.approx(1.0)


def test_conditional_pmf_uninformative_limit():
    src = ps.TwbSourceParams(10.0, 5)
    pmf = ps.conditional_pmf_exact(src, ps.DetectionParams(1e-9, 0.3), 0)
    n = np.arange(ps.multithermal_nmax(10.0, 5) + 1)
    unconditioned = ps.multithermal_pmf(10.0 * 0.3, 5, n)
    np.testing.assert_allclose(pmf[: len(n)], unconditioned, atol=1e-7)


def test_conditional_pmf_errors():
    src = ps.TwbSourceParams(4.0, 10)
    with pytest.raises(DomainError):
        ps.conditional_pmf_exact(src, ps.DetectionParams(0.5, 0.5), 2, n_max=3)
    with pytest.raises(UndefinedEstimateError):
        ps.conditional_pmf_exact(src, ps.DetectionParams(0.0, 0.5), 2)


# --------------------------------------------------------------------------
# bootstrap

def test_bootstrap_constant():
    assert ps.bootstrap(np.mean, np.full(100, 3.0), rng=0) == 0.0


def test_bootstrap_clt():
    x = np.random.default_rng(0).standard_normal(10_000)
    assert ps.bootstrap(np.mean, x, rng=1) == pytest.approx(0.01, rel=0.2)


def test_bootstrap_scale_equivariance():
    x = np.random.default_rng(0).standard_normal(1000)
    assert ps.bootstrap(np.mean, 2 * x, rng=5) == pytest.approx(2 * ps.bootstrap(np.mean, x, rng=5), rel=1e-12)


def test_bootstrap_minimum_resamples():
    with pytest.raises(DomainError):
        ps.bootstrap(np.mean, [1.0, 2.0], n_resamples=49)


def test_weighted_bootstrap_matches_index_bootstrap():
    pairs = np.random.default_rng(3).poisson(2.0, size=(5000, 2))
    fast = ps.empirical_nrf(pairs, rng=4).std_error

    def nrf(p):
        return np.var(p[:, 0] - p[:, 1], ddof=1) / (p.sum(axis=1).mean())

    slow = ps.bootstrap(nrf, pairs, rng=4)
    assert fast == pytest.approx(slow, rel=0.25)
