"""Observed and complete-data log-likelihoods and the conditional law of ``M``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .distributions import NegBinParams, RngStream, negbin_log_pmf, negbin_sample
from .model import CureData, Observation, Params, as_data, weibull_terms

__all__ = [
    "NumericError",
    "ConditionalLaw",
    "observed_loglik",
    "observed_loglik_terms",
    "joint_log_density",
    "lc1_terms",
    "lc2_terms",
    "complete_loglik_split",
    "conditional_law",
    "conditional_laws",
    "conditional_mean",
]


class NumericError(ArithmeticError):
    """A likelihood evaluation produced a non-finite value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


def _pieces(data: CureData, params: Params):
    gamma2 = np.exp(data.x @ params.alpha)
    et = np.exp(data.z @ params.beta)
    f_cdf, s, log_f, log_s = weibull_terms(data.time, params.gamma1, gamma2)
    return et, f_cdf, s, log_f, log_s


def observed_loglik_terms(data, params: Params) -> np.ndarray:
    """Per-subject terms ``delta {log eta + log f - log(1+phi eta F)} - log(1+phi eta F)/phi``."""
    data = as_data(data)
    data.check_params(params)
    et, f_cdf, _, log_f, _ = _pieces(data, params)
    a = np.log1p(params.phi * et * f_cdf)
    ev = data.delta == 1
    out = -a / params.phi
    out[ev] += np.log(et[ev]) + log_f[ev] - a[ev]
    return out


def observed_loglik(data, params: Params, check: bool = True) -> float:
    terms = observed_loglik_terms(data, params)
    if check:
        bad = np.flatnonzero(~np.isfinite(terms))
        if bad.size:
            raise NumericError(
                f"non-finite log-likelihood contribution at observation {int(bad[0])}", index=int(bad[0])
            )
    return math.fsum(terms)


def joint_log_density(t, delta, m, params: Params, x, z):
    """``log f(t, delta, m)`` = ``(m-delta) log S + delta log(m f) + log p_m``."""
    t = np.asarray(t, dtype=float)
    delta = np.asarray(delta)
    m = np.asarray(m)
    gamma2 = np.exp(np.asarray(x, dtype=float) @ params.alpha)
    et = np.exp(np.asarray(z, dtype=float) @ params.beta)
    _, _, log_f, log_s = weibull_terms(t, params.gamma1, gamma2)
    nb = NegBinParams(1.0 / params.phi, 1.0 / (1.0 + params.phi * et))
    with np.errstate(divide="ignore"):
        out = (m - delta) * log_s + negbin_log_pmf(m, nb)
        out = out + np.where(delta == 1, np.log(np.where(m > 0, m, 1)) + log_f, 0.0)
    return np.where(m >= delta, out, -np.inf)


def lc1_terms(phi, beta, z, m):
    """Cure-block complete log-likelihood terms (depend on ``phi, beta`` only)."""
    r = 1.0 / phi
    pe = phi * np.exp(np.asarray(z, dtype=float) @ np.asarray(beta, dtype=float))
    return (
        special.gammaln(m + r)
        - special.gammaln(r)
        + m * (np.log(pe) - np.log1p(pe))
        - r * np.log1p(pe)
    )


def lc2_terms(alpha, gamma1, t, delta, x, m):
    """Lifetime-block terms ``(m - delta) log S + delta log f``."""
    gamma2 = np.exp(np.asarray(x, dtype=float) @ np.asarray(alpha, dtype=float))
    _, _, log_f, log_s = weibull_terms(t, gamma1, gamma2)
    return (m - delta) * log_s + np.where(delta == 1, log_f, 0.0)


def complete_loglik_split(data, m, params: Params):
    """Return ``(lc1, lc2, K)`` whose sum is the complete-data log-likelihood."""
    data = as_data(data)
    m = np.asarray(m)
    if m.shape != data.delta.shape:
        raise ValueError("latent counts must have one entry per observation")
    if np.any(m < data.delta):
        bad = int(np.flatnonzero(m < data.delta)[0])
        raise ValueError(f"observation {bad} has an event but latent count {m[bad]} < 1")
    lc1 = math.fsum(lc1_terms(params.phi, params.beta, data.z, m))
    lc2 = math.fsum(lc2_terms(params.alpha, params.gamma1, data.time, data.delta, data.x, m))
    k = math.fsum(np.where(data.delta == 1, np.log(np.maximum(m, 1)), 0.0) - special.gammaln(m + 1.0))
    return lc1, lc2, k


@dataclass(frozen=True)
class ConditionalLaw:
    """Law of ``M`` given ``(t, delta)``: ``shift + NB(r, p)``.

    Censored subjects have ``r = 1/phi`` and no shift; subjects with an
    observed event have ``r = 1/phi + 1`` and a shift of one.  Fields may be
    arrays for a whole sample.
    """

    r: np.ndarray | float
    p: np.ndarray | float
    shift: np.ndarray | int

    @property
    def kind(self):
        return np.where(np.asarray(self.shift) == 1, "uncensored", "censored")

    @property
    def nb(self) -> NegBinParams:
        return NegBinParams(self.r, self.p)

    def log_pmf(self, m):
        m = np.asarray(m)
        k = m - self.shift
        valid = k >= 0
        out = np.full(np.broadcast(k, self.r).shape, -np.inf)
        kk = np.where(valid, k, 0)
        vals = negbin_log_pmf(kk, self.nb)
        out[...] = np.where(valid, vals, -np.inf)
        return out

    def pmf(self, m):
        return np.exp(self.log_pmf(m))

    def mean(self):
        return self.shift + self.r * (1.0 - self.p) / self.p

    def sample(self, rng: RngStream | np.random.Generator, size=None):
        return self.shift + negbin_sample(self.nb, rng, size=size)


def _p_star(phi, et, s):
    # p* = (1 + phi eta F)/(1 + phi eta) = 1 - phi eta S/(1 + phi eta); clamped at 1 when F == 1
    pe = phi * et
    return np.minimum(1.0, 1.0 - pe * s / (1.0 + pe))


def conditional_laws(data, params: Params) -> ConditionalLaw:
    data = as_data(data)
    et, _, s, _, _ = _pieces(data, params)
    r0 = 1.0 / params.phi
    return ConditionalLaw(r=r0 + data.delta, p=_p_star(params.phi, et, s), shift=data.delta.copy())


def conditional_law(obs: Observation, params: Params) -> ConditionalLaw:
    law = conditional_laws([obs], params)
    return ConditionalLaw(r=float(law.r[0]), p=float(law.p[0]), shift=int(law.shift[0]))


def conditional_mean(data, params: Params):
    """``E[M | t, delta] = (delta + delta phi eta + eta S) / (1 + phi eta F)``."""
    single = isinstance(data, Observation)
    data = as_data([data] if single else data)
    et, f_cdf, s, _, _ = _pieces(data, params)
    d = data.delta
    out = (d + d * params.phi * et + et * s) / (1.0 + params.phi * et * f_cdf)
    return float(out[0]) if single else out
