"""Probability kernel for the cure rate model.

Weibull lifetimes are parameterized by ``gamma1`` (reciprocal shape) and
``gamma2`` (reciprocal scale)::

    S(t) = exp(-(gamma2 t) ** (1 / gamma1))

Negative binomial counts use the ``(r, p)`` form with pmf
``Gamma(m + r) / (Gamma(r) m!) (1 - p)**m p**r``.

All functions accept scalars or numpy arrays and broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

__all__ = [
    "DomainError",
    "WeibullParams",
    "NegBinParams",
    "RngStream",
    "weibull_log_pdf",
    "weibull_pdf",
    "weibull_cdf",
    "weibull_surv",
    "negbin_log_pmf",
    "negbin_pmf",
    "negbin_sample",
    "negbin_tail_cutoff",
    "normal_cdf",
    "normal_quantile",
    "log_gamma",
]

DEFAULT_SEED = 20210531


class DomainError(ValueError):
    """Raised when an argument lies outside the support of a distribution."""


@dataclass(frozen=True)
class WeibullParams:
    gamma1: float
    gamma2: float

    def __post_init__(self):
        if not (np.all(np.asarray(self.gamma1) > 0) and np.all(np.asarray(self.gamma2) > 0)):
            raise DomainError(f"Weibull parameters must be positive, got {self}")


@dataclass(frozen=True)
class NegBinParams:
    r: float
    p: float

    def __post_init__(self):
        r = np.asarray(self.r)
        p = np.asarray(self.p)
        if not np.all(r > 0):
            raise DomainError(f"negative binomial r must be positive, got {self.r}")
        if not np.all((p > 0) & (p <= 1)):
            raise DomainError(f"negative binomial p must lie in (0, 1], got {self.p}")

    @property
    def mean(self):
        return self.r * (1.0 - self.p) / self.p

    @property
    def var(self):
        return self.r * (1.0 - self.p) / self.p**2


@dataclass
class RngStream:
    """A reproducible random stream keyed by ``(seed, stream_id)``.

    Distinct stream ids (or child keys) give independent PCG64 streams via
    numpy's ``SeedSequence`` spawn keys, so replicate ``k`` of a study can be
    regenerated in isolation and in any order.
    """

    seed: int = DEFAULT_SEED
    stream_id: int | Sequence[int] = 0
    _gen: np.random.Generator | None = field(default=None, init=False, repr=False)

    @property
    def key(self) -> tuple[int, ...]:
        if isinstance(self.stream_id, (int, np.integer)):
            return (int(self.stream_id),)
        return tuple(int(s) for s in self.stream_id)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.key)
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def child(self, *ids: int) -> "RngStream":
        """Independent stream nested under this one."""
        return RngStream(self.seed, self.key + tuple(int(i) for i in ids))


# --- Weibull ---------------------------------------------------------------

def _check_time(t, strict=True):
    t = np.asarray(t, dtype=float)
    bad = ~(t > 0) if strict else ~(t >= 0)
    if np.any(bad):
        raise DomainError("times must be positive" if strict else "times must be nonnegative")
    return t


def weibull_log_pdf(t, w: WeibullParams):
    t = _check_time(t)
    lin = np.log(w.gamma2 * t) / w.gamma1
    return -np.log(w.gamma1 * t) + lin - np.exp(lin)


def weibull_pdf(t, w: WeibullParams):
    """Density ``(1/(gamma1 t)) (gamma2 t)^(1/gamma1) exp(-(gamma2 t)^(1/gamma1))``."""
    return np.exp(weibull_log_pdf(t, w))


def weibull_cdf(t, w: WeibullParams):
    t = _check_time(t, strict=False)
    return -np.expm1(-((w.gamma2 * t) ** (1.0 / w.gamma1)))


def weibull_surv(t, w: WeibullParams):
    t = _check_time(t, strict=False)
    return np.exp(-((w.gamma2 * t) ** (1.0 / w.gamma1)))


# --- Negative binomial -----------------------------------------------------

def negbin_log_pmf(m, nb: NegBinParams):
    m = np.asarray(m)
    if np.any(m < 0) or np.any(m != np.floor(m)):
        raise DomainError("counts must be nonnegative integers")
    r = np.asarray(nb.r, dtype=float)
    p = np.asarray(nb.p, dtype=float)
    # special.xlogy gives 0 * log(0) = 0 at p = 1
    return (
        special.gammaln(m + r)
        - special.gammaln(r)
        - special.gammaln(m + 1.0)
        + special.xlogy(m, 1.0 - p)
        + r * np.log(p)
    )


def negbin_pmf(m, nb: NegBinParams):
    return np.exp(negbin_log_pmf(m, nb))


def negbin_sample(nb: NegBinParams, rng: RngStream | np.random.Generator, size=None):
    """Gamma-Poisson draw: ``lam ~ Gamma(r, rate=p/(1-p))``, ``M ~ Poisson(lam)``.

    ``p == 1`` yields 0 deterministically (zero gamma scale).
    """
    gen = rng.generator if isinstance(rng, RngStream) else rng
    r = np.asarray(nb.r, dtype=float)
    p = np.asarray(nb.p, dtype=float)
    scale = (1.0 - p) / p
    lam = gen.gamma(r, scale, size=size)
    return gen.poisson(lam)


def negbin_tail_cutoff(nb: NegBinParams, rel_tol: float = 1e-14, hard_max: int = 10**7) -> int:
    """Smallest truncation point ``M*`` past the mode whose term is negligible.

    Stops once the pmf term drops below ``rel_tol`` times the running sum; the
    terms decay geometrically past the mode, so the neglected tail is bounded
    by a small multiple of the last term.
    """
    r, p = float(nb.r), float(nb.p)
    if p == 1.0:
        return 0
    mode = max(0, int(np.floor((r - 1.0) * (1.0 - p) / p)))
    q = 1.0 - p
    # ratio of consecutive terms: (m + r) q / (m + 1) -> q; bound the tail by a geometric series
    block = max(64, mode + 1)
    m = 0
    total = 0.0
    while m < hard_max:
        ms = np.arange(m, m + block)
        terms = negbin_pmf(ms, nb)
        csum = total + np.cumsum(terms)
        ratio = (ms + 1 + r) * q / (ms + 2)
        tail = terms * ratio / np.maximum(1.0 - ratio, 1e-300)
        ok = (ms > mode) & (terms < rel_tol * csum) & (ratio < 1) & (tail < rel_tol)
        idx = np.flatnonzero(ok)
        if idx.size:
            return int(ms[idx[0]])
        total = csum[-1]
        m += block
        block *= 2
    raise DomainError("negative binomial tail did not decay before hard_max")


# --- Normal / gamma helpers ------------------------------------------------

def normal_cdf(x):
    return special.ndtr(x)


def normal_quantile(u):
    u = np.asarray(u, dtype=float)
    if np.any(~((u > 0) & (u < 1))):
        raise DomainError("normal quantile requires 0 < u < 1")
    out = special.ndtri(u)
    return out if out.ndim else float(out)


def log_gamma(x):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError("log_gamma requires a positive argument")
    out = special.gammaln(x)
    return out if out.ndim else float(out)
