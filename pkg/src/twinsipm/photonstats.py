"""Photon-number statistics of multimode twin beams and their estimators.

Covers the multimode thermal (negative binomial) law, twin-beam sampling,
binomial detection losses, the noise reduction factor (empirical and
closed form), Fano factors, the conditional-state Fano formula and the
exact Bayes posterior used as its oracle.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
from scipy import stats

from .errors import DomainError, EstimationError, UndefinedEstimateError
from .streams import as_generator

#: Prior tail mass tolerated when truncating photon-number supports.
TAIL_TOL = 1e-12
#: Number of bootstrap resamples used by default.
N_BOOTSTRAP = 200
# one-sigma quantiles of a normal law, for the percentile standard error
_Q_LO, _Q_HI = 100 * stats.norm.cdf(-1.0), 100 * stats.norm.cdf(1.0)


def _check_unit(name, value):
    if not 0.0 <= value <= 1.0:
        raise DomainError(f"{name} must lie in [0, 1], got {value!r}")


@dataclass(frozen=True)
class TwbSourceParams:
    """Multimode thermal twin-beam source.

    Parameters
    ----------
    mean_photons : float
        Mean number of generated photons per pulse in each arm.
    modes : float
        Effective number of independent thermal modes (may be fractional).
    """

    mean_photons: float
    modes: float = 100.0

    def __post_init__(self):
        if not self.mean_photons >= 0:
            raise DomainError(f"mean_photons must be >= 0, got {self.mean_photons!r}")
        if not self.modes >= 1:
            raise DomainError(f"modes must be >= 1, got {self.modes!r}")

    @property
    def fano(self) -> float:
        return 1.0 + self.mean_photons / self.modes


@dataclass(frozen=True)
class DetectionParams:
    eta_s: float
    eta_i: float

    def __post_init__(self):
        _check_unit("eta_s", self.eta_s)
        _check_unit("eta_i", self.eta_i)


@dataclass(frozen=True)
class PhotonPair:
    n_s: int
    n_i: int


@dataclass(frozen=True)
class MomentSummary:
    """First two moments of a count sample (unbiased variance)."""

    count: int
    mean: float
    variance: float
    fano: float

    @property
    def fano_defined(self) -> bool:
        return not math.isnan(self.fano)


@dataclass(frozen=True)
class NrfEstimate:
    value: float
    std_error: float
    n_shots: int


@dataclass(frozen=True)
class ConditionalTheoryParams:
    m_cond: int
    mean_m2: float
    modes: float
    eta: float

    def __post_init__(self):
        if self.m_cond < 0:
            raise DomainError("m_cond must be >= 0")
        if not self.mean_m2 >= 0:
            raise DomainError("mean_m2 must be >= 0")
        if not self.modes >= 1:
            raise DomainError("modes must be >= 1")
        _check_unit("eta", self.eta)


# --------------------------------------------------------------------------
# distributions and sampling

def multithermal_pmf(mean, modes, n):
    """Multimode thermal photon-number probability P(n).

    Negative binomial law of ``modes`` equally populated thermal modes with
    total mean ``mean``; ``n`` may be an array.
    """
    if not mean >= 0:
        raise DomainError(f"mean must be >= 0, got {mean!r}")
    if not modes >= 1:
        raise DomainError(f"modes must be >= 1, got {modes!r}")
    n = np.asarray(n)
    if np.any(n < 0):
        raise DomainError("photon numbers must be >= 0")
    if mean == 0:
        out = np.where(n == 0, 1.0, 0.0)
        return out if out.ndim else float(out)
    # scipy evaluates the log-pmf with less cancellation than a plain
    # gammaln difference, which matters for thousands of modes
    out = stats.nbinom.pmf(n, modes, modes / (modes + mean))
    return out if np.ndim(out) else float(out)


def multithermal_nmax(mean, modes, tail=TAIL_TOL) -> int:
    """Smallest support bound whose multithermal tail mass is below ``tail``."""
    if mean == 0:
        return 0
    p = modes / (modes + mean)
    n = int(stats.nbinom.isf(tail, modes, p)) + 1
    while stats.nbinom.sf(n, modes, p) >= tail:
        n += 1
    return n


def sample_multithermal(params: TwbSourceParams, rng=None, size=None):
    """Draw photon numbers from the multimode thermal law.

    Uses the Gamma-Poisson mixture: a rate with shape ``modes`` and mean
    ``mean_photons``, then a Poisson count at that rate.
    """
    rng = as_generator(rng)
    if params.mean_photons == 0:
        return 0 if size is None else np.zeros(size, dtype=np.int64)
    rate = rng.gamma(params.modes, params.mean_photons / params.modes, size=size)
    out = rng.poisson(rate)
    return int(out) if size is None else out.astype(np.int64)


def sample_twb_pair(params: TwbSourceParams, rng=None) -> PhotonPair:
    n = sample_multithermal(params, rng)
    return PhotonPair(n, n)


def sample_twb_pairs(params: TwbSourceParams, size: int, rng=None) -> np.ndarray:
    """Array of ``size`` perfectly correlated pairs, shape ``(size, 2)``."""
    n = sample_multithermal(params, rng, size=size)
    return np.column_stack([n, n])


def apply_binomial_detection(n, eta, rng=None):
    """Binomial thinning of photon number(s) ``n`` with efficiency ``eta``."""
    _check_unit("eta", eta)
    rng = as_generator(rng)
    m = rng.binomial(n, eta)
    return int(m) if np.ndim(m) == 0 else m


# --------------------------------------------------------------------------
# resampling

def _percentile_se(values) -> float:
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return math.nan
    lo, hi = np.percentile(values, [_Q_LO, _Q_HI])
    return float(hi - lo) / 2.0


def bootstrap(statistic, data, n_resamples=N_BOOTSTRAP, rng=None) -> float:
    """Percentile standard error of ``statistic`` under shot resampling.

    ``data`` is resampled with replacement along its first axis; the
    standard error is half the width of the central 68.27% interval of the
    resampled statistic.
    """
    if n_resamples < 50:
        raise DomainError("at least 50 bootstrap resamples are required")
    rng = as_generator(rng)
    data = np.asarray(data)
    n = len(data)
    reps = np.empty(n_resamples)
    for b in range(n_resamples):
        reps[b] = statistic(data[rng.integers(0, n, size=n)])
    return _percentile_se(reps)


def _resampled_weights(data, n_resamples, rng):
    """Distinct rows of ``data`` and multinomial resampling weights.

    Drawing category counts is distributionally identical to resampling
    shots but costs O(distinct rows) per resample.
    """
    rows, counts = np.unique(data, axis=0, return_counts=True)
    n = int(counts.sum())
    weights = rng.multinomial(n, counts / n, size=n_resamples)
    return rows, weights, n


def _weighted_nrf(diff, total, weights, n):
    sd = weights @ diff
    sd2 = weights @ (diff * diff)
    var = (sd2 - sd * sd / n) / (n - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return var / ((weights @ total) / n)


def _weighted_fano(x, weights, n):
    s = weights @ x
    var = (weights @ (x * x) - s * s / n) / (n - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return var / (s / n)


# --------------------------------------------------------------------------
# estimators

def empirical_nrf(pairs, n_resamples=N_BOOTSTRAP, rng=None) -> NrfEstimate:
    """Noise reduction factor ``var(m1 - m2) / <m1 + m2>`` with bootstrap error."""
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise DomainError("pairs must have shape (n_shots, 2)")
    n = len(pairs)
    if n < 2:
        raise DomainError("at least two shots are required")
    diff = (pairs[:, 0] - pairs[:, 1]).astype(float)
    total = (pairs[:, 0] + pairs[:, 1]).astype(float)
    mean_total = total.mean()
    if mean_total == 0:
        raise UndefinedEstimateError("mean total count is zero; NRF undefined")
    value = diff.var(ddof=1) / mean_total
    rows, weights, _ = _resampled_weights(pairs, n_resamples, as_generator(rng))
    reps = _weighted_nrf((rows[:, 0] - rows[:, 1]).astype(float),
                         (rows[:, 0] + rows[:, 1]).astype(float), weights, n)
    return NrfEstimate(float(value), _percentile_se(reps), n)


def fano_factor(sample) -> MomentSummary:
    """Mean, unbiased variance and Fano factor of a count sample.

    The Fano field is NaN when the sample mean is zero.
    """
    x = np.asarray(sample, dtype=float)
    if x.size < 2:
        raise DomainError("at least two values are required")
    mean = float(x.mean())
    var = float(x.var(ddof=1))
    fano = var / mean if mean > 0 else math.nan
    return MomentSummary(int(x.size), mean, var, fano)


def fano_std_error(sample, n_resamples=N_BOOTSTRAP, rng=None) -> float:
    """Bootstrap standard error of the Fano factor of ``sample``."""
    x = np.asarray(sample, dtype=np.int64).reshape(-1, 1)
    if len(x) < 2:
        raise DomainError("at least two values are required")
    rows, weights, n = _resampled_weights(x, n_resamples, as_generator(rng))
    return _percentile_se(_weighted_fano(rows[:, 0].astype(float), weights, n))


def estimate_modes(summary: MomentSummary) -> float:
    """Moments estimator of the thermal mode number, ``mean**2 / (var - mean)``."""
    excess = summary.variance - summary.mean
    if not excess > 0:
        raise EstimationError(
            f"variance {summary.variance:.6g} <= mean {summary.mean:.6g}: "
            "sample is not super-Poissonian, mode number cannot be estimated")
    return summary.mean ** 2 / excess


def estimate_eta_from_nrf(r) -> float:
    """Overall detection efficiency from a measured NRF, ``1 - R``."""
    if not 0.0 <= r <= 1.0:
        raise DomainError(f"NRF {r!r} outside [0, 1] is inconsistent with loss-only detection")
    return 1.0 - r


def theoretical_nrf(eta_s, eta_i, mean_ms, mean_mi, mu_s, mu_i) -> float:
    """Closed-form NRF of a multimode twin beam under real detection."""
    _check_unit("eta_s", eta_s)
    _check_unit("eta_i", eta_i)
    if mean_ms < 0 or mean_mi < 0:
        raise DomainError("mean counts must be >= 0")
    if mu_s < 1 or mu_i < 1:
        raise DomainError("mode numbers must be >= 1")
    total = mean_ms + mean_mi
    if total <= 0:
        raise DomainError("total mean count must be positive")
    correlation = 2.0 * math.sqrt(eta_s * mean_ms * eta_i * mean_mi) / total
    imbalance = (mean_ms - mean_mi) ** 2 / (math.sqrt(mu_s * mu_i) * total)
    return 1.0 - correlation + imbalance


def conditional_fano_theory(p: ConditionalTheoryParams) -> float:
    """Fano factor of the state heralded by ``m_cond`` counts on the other arm."""
    m2, mu, eta, mc = p.mean_m2, p.modes, p.eta, p.m_cond
    denom = (mc + mu) * (m2 + eta * mu) - eta * mu * (m2 + mu)
    if not denom > 0:
        raise DomainError(f"nonpositive denominator {denom!r} in conditional Fano formula")
    return (1.0 - eta) * (1.0 + m2 * (mc + mu) * (m2 + eta * mu) / ((m2 + mu) * denom))


def conditional_pmf_exact(source: TwbSourceParams, det: DetectionParams,
                          m_cond: int, n_max=None) -> np.ndarray:
    """Exact distribution of arm-2 counts given ``m_cond`` counts on arm 1.

    Bayes posterior over the shared photon number ``n`` followed by binomial
    detection on arm 2. Returns probabilities for ``m2 = 0 .. n_max``.
    """
    if m_cond < 0:
        raise DomainError("m_cond must be >= 0")
    needed = multithermal_nmax(source.mean_photons, source.modes)
    if n_max is None:
        n_max = max(needed, m_cond)
    elif n_max < needed:
        raise DomainError(f"n_max={n_max} leaves prior tail mass above {TAIL_TOL:g}; need >= {needed}")
    n = np.arange(n_max + 1)
    prior = multithermal_pmf(source.mean_photons, source.modes, n)
    joint = prior * stats.binom.pmf(m_cond, n, det.eta_s)
    evidence = joint.sum()
    if not evidence > 1e-300:
        raise UndefinedEstimateError(f"P(m1={m_cond}) is numerically zero")
    post_n = joint / evidence
    m = np.arange(n_max + 1)
    pmf = post_n @ stats.binom.pmf(m[None, :], n[:, None], det.eta_i)
    return pmf / pmf.sum()


def pmf_moments(pmf) -> tuple[float, float]:
    """Mean and variance of a pmf indexed from zero."""
    pmf = np.asarray(pmf, dtype=float)
    m = np.arange(len(pmf))
    mean = float(m @ pmf)
    return mean, float(((m - mean) ** 2) @ pmf)
