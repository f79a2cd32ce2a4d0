"""Negative binomial competing-risks cure rate model with Weibull progression times.

The latent number of risks ``M`` is negative binomial with mean
``eta = exp(z'beta)`` and dispersion ``phi``; each risk carries a Weibull
lifetime with reciprocal shape ``gamma1`` and reciprocal scale
``gamma2 = exp(x'alpha)``.  Design matrices carry a leading column of ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .distributions import DomainError

__all__ = [
    "Params",
    "Covariates",
    "Observation",
    "CureData",
    "eta",
    "cure_rate",
    "weibull_terms",
    "population_survival",
    "population_density",
]


@dataclass(frozen=True)
class Params:
    """Full parameter vector.

    The flattened order is ``(phi, alpha..., beta..., gamma1)``.
    """

    phi: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma1: float

    def __post_init__(self):
        object.__setattr__(self, "phi", float(self.phi))
        object.__setattr__(self, "gamma1", float(self.gamma1))
        for name in ("alpha", "beta"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not self.phi > 0:
            raise DomainError(f"phi must be positive, got {self.phi}")
        if not self.gamma1 > 0:
            raise DomainError(f"gamma1 must be positive, got {self.gamma1}")

    @property
    def n_alpha(self) -> int:
        return self.alpha.size

    @property
    def n_beta(self) -> int:
        return self.beta.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.phi], self.alpha, self.beta, [self.gamma1]])

    @classmethod
    def from_vector(cls, vec, n_alpha: int) -> "Params":
        vec = np.asarray(vec, dtype=float)
        return cls(
            phi=vec[0],
            alpha=vec[1 : 1 + n_alpha],
            beta=vec[1 + n_alpha : -1],
            gamma1=vec[-1],
        )

    def names(self) -> list[str]:
        return param_names(self.n_alpha, self.n_beta)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names(), self.to_vector().tolist()))

    def replace(self, **kw) -> "Params":
        d = dict(phi=self.phi, alpha=self.alpha, beta=self.beta, gamma1=self.gamma1)
        d.update(kw)
        return Params(**d)


def param_names(n_alpha: int, n_beta: int) -> list[str]:
    return (
        ["phi"]
        + [f"alpha{j}" for j in range(n_alpha)]
        + [f"beta{j}" for j in range(n_beta)]
        + ["gamma1"]
    )


@dataclass(frozen=True)
class Covariates:
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        for name in ("x", "z"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"covariate vector {name} must be finite")
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class Observation:
    t: float
    delta: int
    cov: Covariates

    def __post_init__(self):
        if not self.t > 0:
            raise DomainError(f"observed time must be positive, got {self.t}")
        if self.delta not in (0, 1):
            raise DomainError(f"delta must be 0 or 1, got {self.delta}")


class CureData:
    """Column-oriented right-censored sample.

    Parameters
    ----------
    time : array of positive floats
    delta : array of 0/1 event indicators (1 = event observed)
    x : (n, p) lifetime design matrix with leading intercept column
    z : (n, q) cure design matrix with leading intercept column
    """

    def __init__(self, time, delta, x, z, x_names=None, z_names=None):
        self.time = np.asarray(time, dtype=float).reshape(-1)
        self.delta = np.asarray(delta).astype(np.int64).reshape(-1)
        n = self.time.size
        self.x = np.asarray(x, dtype=float).reshape(n, -1)
        self.z = np.asarray(z, dtype=float).reshape(n, -1)
        if np.any(~(self.time > 0)):
            raise DomainError("observed times must be positive")
        if np.any((self.delta != 0) & (self.delta != 1)):
            raise DomainError("delta must be 0 or 1")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.z))):
            raise DomainError("covariates must be finite")
        self.x_names = list(x_names) if x_names is not None else [f"x{j}" for j in range(self.x.shape[1])]
        self.z_names = list(z_names) if z_names is not None else [f"z{j}" for j in range(self.z.shape[1])]
        self.log_time = np.log(self.time)

    def __len__(self):
        return self.time.size

    @classmethod
    def from_observations(cls, obs: Iterable[Observation]) -> "CureData":
        obs = list(obs)
        if not obs:
            raise DomainError("empty sample")
        return cls(
            [o.t for o in obs],
            [o.delta for o in obs],
            np.vstack([o.cov.x for o in obs]),
            np.vstack([o.cov.z for o in obs]),
        )

    def observations(self) -> list[Observation]:
        return [
            Observation(float(t), int(d), Covariates(x, z))
            for t, d, x, z in zip(self.time, self.delta, self.x, self.z)
        ]

    def subset(self, idx) -> "CureData":
        return CureData(self.time[idx], self.delta[idx], self.x[idx], self.z[idx], self.x_names, self.z_names)

    def check_params(self, params: Params):
        if params.n_alpha != self.x.shape[1] or params.n_beta != self.z.shape[1]:
            raise ValueError(
                f"parameter dimensions (alpha={params.n_alpha}, beta={params.n_beta}) do not match "
                f"design (x={self.x.shape[1]}, z={self.z.shape[1]})"
            )


def as_data(data) -> CureData:
    """Accept a :class:`CureData` or a list of :class:`Observation`."""
    if isinstance(data, CureData):
        return data
    return CureData.from_observations(data)


def eta(z, beta):
    """Mean number of competing risks, ``exp(z'beta)``."""
    z = np.asarray(z, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if z.shape[-1] != beta.shape[-1]:
        raise ValueError(f"dimension mismatch: z has {z.shape[-1]} columns, beta has {beta.shape[-1]}")
    return np.exp(z @ beta)


def cure_rate(phi, eta_):
    """``p0 = (1 + phi eta) ** (-1/phi)``."""
    return np.exp(-np.log1p(phi * np.asarray(eta_, dtype=float)) / phi)


def weibull_terms(t, gamma1, gamma2):
    """Return ``(F, S, log f, log S)`` of the Weibull lifetime at ``t``.

    ``log S = -u`` with ``u = (gamma2 t) ** (1/gamma1)``; computed on the log
    scale so extreme shapes stay finite.
    """
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        lin = (np.log(gamma2) + np.log(t)) / gamma1
    u = np.exp(lin)
    log_s = -u
    s = np.exp(log_s)
    f_cdf = -np.expm1(log_s)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_f = -np.log(gamma1) - np.log(t) + lin - u
    return f_cdf, s, log_f, log_s


def _linear_parts(params: Params, x, z):
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    return np.exp(x @ params.alpha), np.exp(z @ params.beta)


def population_survival(t, params: Params, x, z):
    """Long-term survival ``{1 / (1 + phi eta F(t))} ** (1/phi)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("times must be nonnegative")
    gamma2, et = _linear_parts(params, x, z)
    f_cdf, _, _, _ = weibull_terms(t, params.gamma1, gamma2)
    out = np.exp(-np.log1p(params.phi * et * f_cdf) / params.phi)
    return out if np.ndim(out) else float(out)


def population_density(t, params: Params, x, z):
    """Improper density ``eta f(t) {1 / (1 + phi eta F(t))} ** (1/phi + 1)``."""
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise DomainError("times must be positive")
    gamma2, et = _linear_parts(params, x, z)
    f_cdf, _, log_f, _ = weibull_terms(t, params.gamma1, gamma2)
    out = np.exp(np.log(et) + log_f - (1.0 / params.phi + 1.0) * np.log1p(params.phi * et * f_cdf))
    return out if np.ndim(out) else float(out)
