"""Model assessment: Kaplan-Meier curves, randomized quantile residuals, KS normality test."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import special

from .distributions import RngStream, normal_cdf, normal_quantile
from .model import CureData, Params, as_data, population_survival, weibull_terms

__all__ = [
    "KmCurve",
    "ResidualSet",
    "product_limit",
    "kaplan_meier",
    "fitted_curves",
    "band_coverage",
    "quantile_residuals",
    "ks_normal_test",
]

log = logging.getLogger(__name__)

U_CLAMP = 1e-12


@dataclass
class KmCurve:
    """Product-limit step function evaluated at distinct event times.

    ``lower``/``upper`` are a pointwise 95% band built on the log scale from
    Greenwood's variance.
    """

    times: np.ndarray
    surv: np.ndarray
    n_at_risk: np.ndarray
    n_events: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    group: float | None = None
    n: int = 0

    @property
    def plateau(self) -> float:
        return float(self.surv[-1]) if self.surv.size else 1.0

    def __call__(self, t):
        """Right-continuous step value at ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        vals = np.where(idx >= 0, self.surv[np.maximum(idx, 0)], 1.0)
        return vals if vals.ndim else float(vals)


def product_limit(time, delta, group=None, z95: float = 1.959963984540054) -> KmCurve:
    """Kaplan-Meier estimator; censorings tied with events are still at risk."""
    time = np.asarray(time, dtype=float)
    delta = np.asarray(delta).astype(int)
    if np.any(~(time > 0)):
        raise ValueError("times must be positive")
    ev_times = np.unique(time[delta == 1])
    # at risk at t: everyone with time >= t
    sorted_t = np.sort(time)
    n_risk = time.size - np.searchsorted(sorted_t, ev_times, side="left")
    ev_sorted = np.sort(time[delta == 1])
    d = np.searchsorted(ev_sorted, ev_times, side="right") - np.searchsorted(ev_sorted, ev_times, side="left")
    surv = np.cumprod(1.0 - d / n_risk)
    with np.errstate(divide="ignore", invalid="ignore"):
        gw = np.cumsum(d / (n_risk * (n_risk - d)))
        half = z95 * np.sqrt(gw)
        lower = np.where(surv > 0, surv * np.exp(-half), 0.0)
        upper = np.where(surv > 0, np.minimum(1.0, surv * np.exp(half)), 0.0)
    return KmCurve(ev_times, surv, n_risk, d, lower, upper, group=group, n=int(time.size))


def kaplan_meier(data, group_column: int | None = 1) -> list[KmCurve]:
    """One curve per distinct value of ``z[:, group_column]`` (ascending).

    ``group_column=None`` pools all subjects.
    """
    data = as_data(data)
    if group_column is None or data.z.shape[1] <= group_column:
        return [product_limit(data.time, data.delta)]
    col = data.z[:, group_column]
    curves = []
    for g in np.unique(col):
        idx = col == g
        if not idx.any():  # pragma: no cover - unique() never yields empty groups
            log.warning("group %s is empty; skipped", g)
            continue
        curves.append(product_limit(data.time[idx], data.delta[idx], group=float(g)))
    return curves


def fitted_curves(data, params: Params, curves: list[KmCurve], group_column: int | None = 1):
    """Fitted population survival on each KM grid, prefixed with ``t = 0``.

    Each group is represented by its first subject's covariates.  Returns a
    list of ``(group, times, surv)`` tuples.
    """
    data = as_data(data)
    out = []
    for c in curves:
        if c.group is None:
            x = data.x.mean(axis=0)
            z = data.z.mean(axis=0)
        else:
            i = int(np.flatnonzero(data.z[:, group_column] == c.group)[0])
            x, z = data.x[i], data.z[i]
        grid = np.concatenate([[0.0], c.times])
        out.append((c.group, grid, np.asarray(population_survival(grid, params, x, z))))
    return out


def band_coverage(curve: KmCurve, fitted_surv) -> float:
    """Fraction of KM grid points where the fitted survival lies inside the band."""
    s = np.asarray(fitted_surv, dtype=float)
    if s.size == curve.times.size + 1:
        s = s[1:]
    inside = (s >= curve.lower - 1e-12) & (s <= curve.upper + 1e-12)
    return float(inside.mean()) if inside.size else 1.0


@dataclass
class ResidualSet:
    """Median of the sorted residual sets, plus the raw per-subject draws.

    ``draws[k, i]`` is subject ``i``'s residual in randomization ``k``.
    """

    residuals: np.ndarray
    replicates: int
    draws: np.ndarray

    def __len__(self):
        return self.residuals.size


def quantile_residuals(data, params: Params, rng: RngStream | np.random.Generator | None = None,
                       replicates: int = 5) -> ResidualSet:
    """Normalized randomized quantile residuals ``-Phi^{-1}(u_i)``.

    ``u_i = S_p(t_i)`` for an event and ``u_i ~ U(0, S_p(t_i))`` for a
    censored time, so long survivors give large positive residuals.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    data = as_data(data)
    gen = (rng or RngStream()).generator if not isinstance(rng, np.random.Generator) else rng
    sp = _population_survival_rows(data, params)
    draws = np.empty((replicates, sp.size))
    cens = data.delta == 0
    for k in range(replicates):
        u = sp.copy()
        u[cens] = gen.uniform(size=int(cens.sum())) * sp[cens]
        u = np.clip(u, U_CLAMP, 1.0 - U_CLAMP)
        draws[k] = -normal_quantile(u)
    med = np.median(np.sort(draws, axis=1), axis=0)
    return ResidualSet(med, replicates, draws)


def _population_survival_rows(data: CureData, params: Params) -> np.ndarray:
    gamma2 = np.exp(data.x @ params.alpha)
    et = np.exp(data.z @ params.beta)
    f_cdf, _, _, _ = weibull_terms(data.time, params.gamma1, gamma2)
    return np.exp(-np.log1p(params.phi * et * f_cdf) / params.phi)


def ks_normal_test(sample) -> tuple[float, float]:
    """One-sample Kolmogorov-Smirnov test against N(0, 1).

    The p-value is the asymptotic Kolmogorov tail at ``sqrt(n) D``.
    """
    x = np.sort(np.asarray(sample, dtype=float).reshape(-1))
    n = x.size
    if n < 1:
        raise ValueError("empty sample")
    cdf = normal_cdf(x)
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))
    d = min(max(d, 0.0), 1.0)
    p = float(special.kolmogorov(np.sqrt(n) * d))
    return d, min(max(p, 0.0), 1.0)
