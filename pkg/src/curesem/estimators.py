"""Fitting engines: stochastic EM, profile-likelihood EM, direct maximization, Monte Carlo EM.

All engines share the same inference machinery: standard errors from the
inverse of the negative numerical Hessian of the observed log-likelihood at
the returned estimate, Wald intervals, and delta-method cure rates.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize as sopt
from scipy import special

from .distributions import DEFAULT_SEED, RngStream
from .likelihood import (
    NumericError,
    conditional_laws,
    conditional_mean,
    observed_loglik,
    observed_loglik_terms,
)
from .model import CureData, Params, as_data, cure_rate
from .optimize import OptimConfig, OptimizationError, find_root, maximize, maximize_newton, numeric_hessian

__all__ = [
    "FitError",
    "SemConfig",
    "EmConfig",
    "McemConfig",
    "FitResult",
    "CureRateEstimate",
    "fit_sem",
    "fit_em",
    "fit_dm",
    "fit_mcem",
    "standard_errors",
    "cure_rate_inference",
    "initial_values",
    "solve_cure_equations",
    "weibull_moment_match",
    "CureBlock",
    "LifetimeBlock",
]

log = logging.getLogger(__name__)

Z95 = 1.959963984540054
MSTEP = OptimConfig(max_iters=2000, x_tol=1e-7, f_tol=1e-9)
# box for log(phi) inside the cure-block M-step
PHI_MIN = 1e-8
PHI_MAX = 1e4


class FitError(RuntimeError):
    """No usable estimate could be produced."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# --- complete-data blocks ---------------------------------------------------

_R_SERIES = 16


def _log1p_ratio(x):
    """``r(x) = log1p(x)/x`` and its first two derivatives, with ``r(0) = 1``.

    A power series is used below ``x = 1e-2`` where the closed forms cancel.
    """
    x = np.asarray(x, dtype=float)
    small = x < 1e-2
    xs = np.where(small, x, 0.0)
    xb = np.where(small, 1.0, x)
    k = np.arange(_R_SERIES)
    sign = (-1.0) ** k
    pw = xs[..., None] ** k
    r0s = (sign / (k + 1) * pw).sum(-1)
    r1s = (sign[1:] * k[1:] / (k[1:] + 1) * pw[..., :-1]).sum(-1)
    r2s = (sign[2:] * k[2:] * (k[2:] - 1) / (k[2:] + 1) * pw[..., :-2]).sum(-1)
    with np.errstate(over="ignore", invalid="ignore"):
        L = np.log1p(xb)
        n = xb / (1.0 + xb) - L
        r0b = L / xb
        r1b = n / xb**2
        r2b = -1.0 / (xb * (1.0 + xb) ** 2) - 2.0 * n / xb**3
    return np.where(small, r0s, r0b), np.where(small, r1s, r1b), np.where(small, r2s, r2b)


class CureBlock:
    """Complete-data cure block ``lc1(phi, beta)`` from imputed latent counts.

    ``draws`` is an ``(S, n)`` array of latent-count imputations; the block is
    the average of ``lc1`` over the ``S`` rows.  Sufficient statistics are
    collapsed over distinct rows of ``z`` and distinct count values, so the
    cost of one evaluation does not grow with ``S``.  Passing ``means``
    instead (the EM case, ``phi`` held fixed) drops the ``log Gamma`` term,
    which is then constant.
    """

    def __init__(self, z, draws=None, means=None):
        z = np.asarray(z, dtype=float)
        self.n = z.shape[0]
        self.uz, inv = np.unique(z, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        self.n_k = np.bincount(inv, minlength=len(self.uz)).astype(float)
        if draws is not None:
            draws = np.atleast_2d(np.asarray(draws))
            s = draws.shape[0]
            mbar = draws.mean(axis=0)
            vals, counts = np.unique(draws, return_counts=True)
            self.m_vals = vals.astype(float)
            self.m_wts = counts / s
            self.m_idx = vals.astype(np.int64)
            self.m_max = int(vals.max()) if vals.size else 0
            self.with_gamma = True
        else:
            mbar = np.asarray(means, dtype=float)
            self.with_gamma = False
        self.msum_k = np.bincount(inv, weights=mbar, minlength=len(self.uz))

    def value(self, phi, beta) -> float:
        # log G(m + 1/phi) - log G(1/phi) - m log phi = sum_{k<m} log1p(k phi), stable as phi -> 0
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            lin = self.uz @ beta
            l1p = np.log1p(phi * np.exp(lin))
            out = float(self.msum_k @ (lin - l1p) - (self.n_k @ l1p) / phi)
            if self.with_gamma and self.m_max > 0:
                c = np.concatenate([[0.0], np.cumsum(np.log1p(phi * np.arange(self.m_max)))])
                out += float(self.m_wts @ c[self.m_idx])
        return out

    def objective(self, v) -> float:
        """``lc1`` at ``v = (phi, beta)``; ``-inf`` outside the ``phi`` box."""
        if not PHI_MIN <= v[0] <= PHI_MAX:
            return -math.inf
        return self.value(v[0], v[1:])

    def objective_beta(self, phi):
        return lambda b: self.value(phi, b)

    def fgh(self, v):
        """Value, gradient and Hessian in ``v = (phi, beta)``.

        The ``phi`` scale is natural rather than logarithmic so the
        derivatives stay informative at the Poisson boundary ``phi -> 0``.
        """
        phi = float(v[0])
        if not PHI_MIN <= phi <= PHI_MAX:
            return -math.inf, None, None
        beta = np.asarray(v[1:])
        z = self.uz
        with np.errstate(over="ignore", invalid="ignore"):
            lin = z @ beta
            e = np.exp(lin)
            x = phi * e
            L = np.log1p(x)
            q = x / (1.0 + x)
            r0, r1, r2 = _log1p_ratio(x)
            a = e / (1.0 + x)
            b = e / (1.0 + x) ** 2
        M, N = self.msum_k, self.n_k
        # -(1/phi) log1p(phi e) = -e r0(phi e), with r0(x) = log1p(x)/x
        f = float(M @ (lin - L) - N @ (e * r0))
        g_p = float(-(M @ a) - N @ (e * e * r1))
        h_pp = float(M @ (e * b) - N @ (e**3 * r2))
        w_b = M * (1.0 - q) - N * a
        h_bp = z.T @ ((N * e - M) * b)
        h_bb = -(z.T * (M * q * (1.0 - q) + N * b)) @ z
        if self.with_gamma and self.m_max > 0:
            k = np.arange(self.m_max, dtype=float)
            c0 = np.concatenate([[0.0], np.cumsum(np.log1p(phi * k))])
            c1 = np.concatenate([[0.0], np.cumsum(k / (1.0 + phi * k))])
            c2 = np.concatenate([[0.0], np.cumsum((k / (1.0 + phi * k)) ** 2)])
            f += float(self.m_wts @ c0[self.m_idx])
            g_p += float(self.m_wts @ c1[self.m_idx])
            h_pp -= float(self.m_wts @ c2[self.m_idx])
        g = np.concatenate([[g_p], z.T @ w_b])
        H = np.empty((g.size, g.size))
        H[0, 0] = h_pp
        H[0, 1:] = H[1:, 0] = h_bp
        H[1:, 1:] = h_bb
        return f, g, H

    def fgh_beta(self, phi):
        def fgh(b):
            f, g, H = self.fgh(np.concatenate([[phi], b]))
            return (f, None, None) if g is None else (f, g[1:], H[1:, 1:])

        return fgh


class LifetimeBlock:
    """Complete-data lifetime block ``lc2(alpha, gamma1)``.

    With ``lin = x'alpha + log t`` and ``u = exp(lin/gamma1)``,
    ``lc2 = -sum(m u) + sum(delta (lin/gamma1 - log gamma1 - log t))``.
    """

    def __init__(self, data: CureData, mbar):
        self.x = data.x
        self.log_t = data.log_time
        self.mbar = np.asarray(mbar, dtype=float)
        d = data.delta.astype(float)
        self.n_events = float(d.sum())
        self.dx = d @ data.x
        self.dlogt = float(d @ data.log_time)

    def value(self, alpha, gamma1) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            lin = self.x @ alpha + self.log_t
            u = np.exp(lin / gamma1)
            dlin = self.dx @ alpha + self.dlogt
            return float(-(self.mbar @ u) + dlin / gamma1 - self.n_events * math.log(gamma1) - self.dlogt)

    def objective(self, u) -> float:
        """``lc2`` on the optimizer scale ``u = (alpha, log gamma1)``."""
        return self.value(u[:-1], math.exp(u[-1]))

    def fgh(self, u):
        """Value, gradient and Hessian in ``u = (alpha, log gamma1)``."""
        alpha = np.asarray(u[:-1])
        g1 = math.exp(u[-1])
        with np.errstate(over="ignore", invalid="ignore"):
            lin = self.x @ alpha + self.log_t
            a = lin / g1
            e = np.exp(a)
        me = self.mbar * e
        dlin = float(self.dx @ alpha + self.dlogt)
        f = float(-me.sum() + dlin / g1 - self.n_events * u[-1] - self.dlogt)
        g = np.concatenate([(self.dx - self.x.T @ me) / g1, [float(me @ a) - dlin / g1 - self.n_events]])
        k = alpha.size
        H = np.empty((k + 1, k + 1))
        H[:k, :k] = -(self.x.T * me) @ self.x / g1**2
        H[:k, k] = H[k, :k] = (self.x.T @ (me * (a + 1.0)) - self.dx) / g1
        H[k, k] = float(-(me @ (a * (a + 1.0)))) + dlin / g1
        return f, g, H


# --- results ----------------------------------------------------------------

@dataclass
class CureRateEstimate:
    profile: np.ndarray
    estimate: float
    se: float
    ci95: tuple[float, float]


@dataclass
class FitResult:
    params: Params
    loglik: float
    algorithm: str
    se: np.ndarray | None = None
    cov: np.ndarray | None = None
    wall_time: float = 0.0
    converged: bool = True
    boundary: bool = False
    trace: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    cure_rates: list = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return self.params.names()

    @property
    def estimates(self) -> np.ndarray:
        return self.params.to_vector()

    @property
    def ci95(self) -> np.ndarray | None:
        if self.se is None:
            return None
        est = self.estimates
        return np.column_stack([est - Z95 * self.se, est + Z95 * self.se])


# --- inference ---------------------------------------------------------------

def _loglik_natural(data: CureData, n_alpha: int):
    def f(vec):
        if vec[0] <= 0 or vec[-1] <= 0:
            return -np.inf
        return observed_loglik(data, Params.from_vector(vec, n_alpha), check=False)

    return f


def standard_errors(data, params: Params):
    """Return ``(se, cov)`` from the observed information; ``(None, None)`` if singular.

    The Hessian is taken with respect to the natural parameters
    ``(phi, alpha, beta, gamma1)``.
    """
    data = as_data(data)
    f = _loglik_natural(data, params.n_alpha)
    try:
        H = numeric_hessian(f, params.to_vector())
    except ValueError as exc:
        log.warning("Hessian evaluation failed: %s", exc)
        return None, None
    info = -H
    try:
        eig = np.linalg.eigvalsh(info)
    except np.linalg.LinAlgError:
        return None, None
    if not np.all(eig > 0):
        log.warning("observed information is not positive definite (min eigenvalue %.3g)", eig.min())
        return None, None
    cov = np.linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    return np.sqrt(np.diag(cov)), cov


def _finish(data, params, algorithm, t0, compute_se=True, **kw) -> FitResult:
    ll = observed_loglik(data, params)
    se, cov = standard_errors(data, params) if compute_se else (None, None)
    et = np.exp(data.z @ params.beta)
    # phi pinned near the lower box edge is the Poisson boundary
    boundary = bool(np.any(et < 1e-8) or params.phi > 50 or params.phi < 1e-6)
    return FitResult(
        params=params,
        loglik=ll,
        algorithm=algorithm,
        se=se,
        cov=cov,
        boundary=boundary,
        wall_time=time.perf_counter() - t0,
        **kw,
    )


def cure_rate_inference(fit: FitResult, profiles) -> list[CureRateEstimate]:
    """Delta-method inference for ``p0(z) = (1 + phi exp(z'beta)) ** (-1/phi)``."""
    if fit.cov is None:
        raise ValueError("fit carries no covariance matrix")
    p = fit.params
    idx = [0] + list(range(1 + p.n_alpha, 1 + p.n_alpha + p.n_beta))
    sub = fit.cov[np.ix_(idx, idx)]
    out = []
    for z in profiles:
        z = np.asarray(getattr(z, "z", z), dtype=float).reshape(-1)

        def g(v, z=z):
            return float(cure_rate(v[0], np.exp(z @ v[1:])))

        v0 = np.concatenate([[p.phi], p.beta])
        est = g(v0)
        grad = np.empty(v0.size)
        for j in range(v0.size):
            h = 1e-6 * max(1.0, abs(v0[j]))
            e = np.zeros(v0.size)
            e[j] = h
            grad[j] = (g(v0 + e) - g(v0 - e)) / (2 * h)
        se = float(math.sqrt(max(grad @ sub @ grad, 0.0)))
        ci = (max(0.0, est - Z95 * se), min(1.0, est + Z95 * se))
        out.append(CureRateEstimate(profile=z, estimate=est, se=se, ci95=ci))
    return out


# --- SEM ---------------------------------------------------------------------

@dataclass
class SemConfig:
    total_iters: int = 1500
    burn_in: int = 500
    mle_rule: str = "max-loglik"
    rng: RngStream = field(default_factory=RngStream)
    mstep: OptimConfig = MSTEP

    def __post_init__(self):
        if not 0 <= self.burn_in < self.total_iters:
            raise ValueError("need 0 <= burn_in < total_iters")
        if self.mle_rule not in ("mean", "max-loglik"):
            raise ValueError("mle_rule must be 'mean' or 'max-loglik'")


def _u1(p: Params):
    return np.concatenate([[p.phi], p.beta])


def _u2(p: Params):
    return np.concatenate([p.alpha, [math.log(p.gamma1)]])


def _phi_box(n_beta):
    lo = np.full(n_beta + 1, -np.inf)
    hi = np.full(n_beta + 1, np.inf)
    lo[0], hi[0] = PHI_MIN, PHI_MAX
    return lo, hi


def _block_max(fgh, objective, start, cfg: OptimConfig, lower=None, upper=None):
    """Newton ascent with a Nelder-Mead fallback when Newton stalls."""
    try:
        res = maximize_newton(fgh, start, lower=lower, upper=upper)
        if res.converged:
            return res.argmax
    except (OptimizationError, np.linalg.LinAlgError):
        pass
    return maximize(objective, start, cfg).argmax


def _mstep(data, params: Params, cure: CureBlock, life: LifetimeBlock, cfg: OptimConfig):
    """Maximize the two blocks independently; a failed block keeps its old value."""
    failures = 0
    phi, beta, alpha, gamma1 = params.phi, params.beta, params.alpha, params.gamma1
    try:
        u1 = _block_max(cure.fgh, cure.objective, _u1(params), cfg, *_phi_box(params.n_beta))
        phi, beta = float(u1[0]), u1[1:]
    except (OptimizationError, OverflowError) as exc:
        log.debug("cure block M-step failed: %s", exc)
        failures += 1
    try:
        u2 = _block_max(life.fgh, life.objective, _u2(params), cfg)
        alpha, gamma1 = u2[:-1], math.exp(u2[-1])
    except (OptimizationError, OverflowError) as exc:
        log.debug("lifetime block M-step failed: %s", exc)
        failures += 1
    return Params(phi=phi, alpha=alpha, beta=beta, gamma1=gamma1), failures


def _chain_mean(chain: np.ndarray) -> np.ndarray:
    est = chain.mean(axis=0)
    est[0] = math.exp(np.log(chain[:, 0]).mean())
    return est


def fit_sem(data, init: Params, cfg: SemConfig | None = None, compute_se: bool = True) -> FitResult:
    """Stochastic EM.

    Each iteration imputes every latent count from its exact conditional law
    at the current estimate (S-step) and maximizes the cure and lifetime
    blocks separately (M-step).  The chain after ``burn_in`` yields the point
    estimate under ``cfg.mle_rule``; both rules are kept in ``info``.
    """
    cfg = cfg or SemConfig()
    data = as_data(data)
    data.check_params(init)
    if len(data) == 0:
        raise FitError("empty sample")
    t0 = time.perf_counter()
    gen = cfg.rng.generator
    theta = init
    dim = init.to_vector().size
    chain = np.empty((cfg.total_iters + 1, dim))
    chain[0] = init.to_vector()
    ll = np.full(cfg.total_iters + 1, np.nan)
    failures = 0
    for k in range(1, cfg.total_iters + 1):
        m = conditional_laws(data, theta).sample(gen)
        cure = CureBlock(data.z, draws=m[None, :])
        life = LifetimeBlock(data, m)
        theta, nf = _mstep(data, theta, cure, life, cfg.mstep)
        failures += nf
        chain[k] = theta.to_vector()
        if k > cfg.burn_in:
            ll[k] = observed_loglik(data, theta, check=False)
    kept = chain[cfg.burn_in + 1 :]
    kept_ll = ll[cfg.burn_in + 1 :]
    finite = np.where(np.isfinite(kept_ll), kept_ll, -np.inf)
    best = int(np.argmax(finite))
    if not np.isfinite(finite[best]):
        raise FitError("observed log-likelihood is not finite anywhere on the retained chain")
    maxll_params = Params.from_vector(kept[best], init.n_alpha)
    mean_params = Params.from_vector(_chain_mean(kept), init.n_alpha)
    params = maxll_params if cfg.mle_rule == "max-loglik" else mean_params
    return _finish(
        data,
        params,
        "sem",
        t0,
        compute_se,
        trace={"theta": chain, "loglik": ll},
        info={
            "mle_rule": cfg.mle_rule,
            "mean_params": mean_params,
            "maxll_params": maxll_params,
            "best_iteration": cfg.burn_in + 1 + best,
            "mstep_failures": failures,
        },
    )


# --- profile EM ----------------------------------------------------------------

@dataclass
class EmConfig:
    phi_grid: Sequence[float] = tuple(np.round(np.arange(1, 101) * 0.1, 10))
    eps: float = 1e-3
    max_iters: int = 20000
    mstep: OptimConfig = MSTEP
    # chain each grid point from the previous converged one; faster but the
    # result then depends on grid order
    warm_start: bool = False

    def __post_init__(self):
        grid = np.asarray(self.phi_grid, dtype=float)
        if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
            raise ValueError("phi_grid must be a nonempty ascending grid of positive values")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def _rel_change(new, old, floor=1e-6):
    return float(np.max(np.abs(new - old) / np.maximum(np.abs(old), floor)))


def em_fixed_phi(data: CureData, init: Params, phi: float, eps: float, max_iters: int, mstep=MSTEP):
    """EM iterations with ``phi`` held fixed.

    Returns ``(params, converged, iterations, loglik_trace)``.
    """
    theta = init.replace(phi=phi)
    lls = [observed_loglik(data, theta, check=False)]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        mhat = conditional_mean(data, theta)
        cure = CureBlock(data.z, means=mhat)
        life = LifetimeBlock(data, mhat)
        b = _block_max(cure.fgh_beta(phi), cure.objective_beta(phi), theta.beta, mstep)
        u2 = _block_max(life.fgh, life.objective, _u2(theta), mstep)
        new = Params(phi=phi, alpha=u2[:-1], beta=b, gamma1=math.exp(u2[-1]))
        lls.append(observed_loglik(data, new, check=False))
        old_v, new_v = theta.to_vector()[1:], new.to_vector()[1:]
        theta = new
        if _rel_change(new_v, old_v) < eps:
            converged = True
            break
    return theta, converged, it, np.array(lls)


def fit_em(data, init: Params, cfg: EmConfig | None = None, compute_se: bool = True) -> FitResult:
    """Profile-likelihood EM over a grid of fixed ``phi`` values.

    Every grid point starts from ``init`` unless ``cfg.warm_start`` is set.
    The estimate is the grid point with the largest observed log-likelihood;
    standard errors treat ``phi`` as estimated (full Hessian).
    """
    cfg = cfg or EmConfig()
    data = as_data(data)
    data.check_params(init)
    t0 = time.perf_counter()
    profile = []
    best = None
    start = init
    for phi in np.asarray(cfg.phi_grid, dtype=float):
        try:
            theta, conv, iters, lls = em_fixed_phi(data, start, float(phi), cfg.eps, cfg.max_iters, cfg.mstep)
        except (OptimizationError, NumericError) as exc:
            warnings.warn(f"EM failed at phi={phi}: {exc}")
            profile.append({"phi": float(phi), "loglik": float("nan"), "converged": False, "iterations": 0})
            continue
        ll = lls[-1]
        profile.append({"phi": float(phi), "loglik": float(ll), "converged": conv, "iterations": iters,
                        "trace": lls})
        if not conv or not np.isfinite(ll):
            warnings.warn(f"EM did not converge at phi={phi}; grid point excluded")
            continue
        if cfg.warm_start:
            start = theta
        if best is None or ll > best[1]:
            best = (theta, ll)
    if best is None:
        raise FitError("EM failed at every grid point", diagnostics={"profile": _strip(profile)})
    return _finish(
        data,
        best[0],
        "em",
        t0,
        compute_se,
        trace={"profile": profile},
        info={"profile": _strip(profile)},
    )


def _strip(profile):
    return [{k: v for k, v in p.items() if k != "trace"} for p in profile]


# --- direct maximization -------------------------------------------------------

def _to_u(p: Params):
    v = p.to_vector().copy()
    v[0] = math.log(v[0])
    v[-1] = math.log(v[-1])
    return v


def _from_u(u, n_alpha):
    v = np.array(u, dtype=float)
    v[0] = math.exp(v[0])
    v[-1] = math.exp(v[-1])
    return Params.from_vector(v, n_alpha)


def fit_dm(data, init: Params, cfg: OptimConfig | None = None, compute_se: bool = True) -> FitResult:
    """Maximize the observed log-likelihood over all parameters jointly."""
    cfg = cfg or OptimConfig(max_iters=20000, x_tol=1e-8, f_tol=1e-10, restarts=3)
    data = as_data(data)
    data.check_params(init)
    t0 = time.perf_counter()

    def obj(u):
        with np.errstate(all="ignore"):
            try:
                p = _from_u(u, init.n_alpha)
            except (ValueError, OverflowError):
                return -np.inf
            return float(np.sum(observed_loglik_terms(data, p)))

    res = maximize(obj, _to_u(init), cfg)
    if not res.converged:
        raise OptimizationError("direct maximization did not converge", best=_from_u(res.argmax, init.n_alpha))
    return _finish(data, _from_u(res.argmax, init.n_alpha), "dm", t0, compute_se,
                   info={"iterations": res.iterations, "evaluations": res.evaluations})


# --- Monte Carlo EM ----------------------------------------------------------------

@dataclass
class McemConfig:
    """Monte Carlo EM settings.

    Convergence compares the ``window``-iterate moving average with its
    value ``lag`` iterations earlier: the relative change per iteration,
    ``|a_k - a_{k-lag}| / (lag |a_{k-lag}|)``, must fall below ``eps`` in
    every coordinate.  ``lag=1`` is the plain relative-change rule.
    """

    mc_samples: int = 500
    eps: float = 2.5e-4
    max_iters: int = 1000
    window: int = 3
    lag: int = 50
    rng: RngStream = field(default_factory=lambda: RngStream(DEFAULT_SEED, 1))
    mstep: OptimConfig = MSTEP

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.window < 1 or self.lag < 1:
            raise ValueError("window and lag must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def mcem_blocks(data: CureData, draws) -> tuple[CureBlock, LifetimeBlock]:
    """Monte Carlo E-step: average both complete-data blocks over ``draws``."""
    draws = np.atleast_2d(draws)
    return CureBlock(data.z, draws=draws), LifetimeBlock(data, draws.mean(axis=0))


def fit_mcem(data, init: Params, cfg: McemConfig | None = None, compute_se: bool = True) -> FitResult:
    """Monte Carlo EM with ``phi`` estimated jointly.

    Convergence is judged on the moving average of the last ``window``
    iterates, which is also the returned estimate.
    """
    cfg = cfg or McemConfig()
    data = as_data(data)
    data.check_params(init)
    t0 = time.perf_counter()
    gen = cfg.rng.generator
    theta = init
    hist = [init.to_vector()]
    avgs = []
    converged = False
    for _ in range(cfg.max_iters):
        draws = conditional_laws(data, theta).sample(gen, size=(cfg.mc_samples, len(data)))
        cure, life = mcem_blocks(data, draws)
        theta, _ = _mstep(data, theta, cure, life, cfg.mstep)
        hist.append(theta.to_vector())
        if len(hist) > cfg.window:
            avgs.append(np.mean(hist[-cfg.window :], axis=0))
            if len(avgs) > cfg.lag and _rel_change(avgs[-1], avgs[-1 - cfg.lag]) < cfg.eps * cfg.lag:
                converged = True
                break
    est = avgs[-1] if avgs else hist[-1]
    if not converged:
        warnings.warn("MCEM reached max_iters without meeting the tolerance")
    params = Params.from_vector(est, init.n_alpha)
    return _finish(data, params, "mcem", t0, compute_se, converged=converged,
                   trace={"theta": np.array(hist)}, info={"iterations": len(hist) - 1})


# --- initialization ------------------------------------------------------------------

def weibull_moment_match(mean: float, var: float) -> tuple[float, float]:
    """Solve ``mean = G(1+g1)/g2`` and ``var = [G(1+2 g1) - G(1+g1)^2]/g2^2``."""
    if not (mean > 0 and var > 0):
        raise ValueError("mean and variance must be positive")
    cv2 = var / mean**2

    def g(lg1):
        g1 = math.exp(lg1)
        return math.exp(special.gammaln(1 + 2 * g1) - 2 * special.gammaln(1 + g1)) - 1.0 - cv2

    lg1 = find_root(g, math.log(1e-4), math.log(50.0), tol=1e-13)
    g1 = math.exp(lg1)
    return g1, math.exp(special.gammaln(1 + g1)) / mean


def solve_cure_equations(levels, plateaus, start=None):
    """Least-squares fit of ``(beta0, beta1, phi)`` to group cure-rate estimates.

    Solves ``plateau_j = (1 + phi exp(beta0 + beta1 level_j)) ** (-1/phi)``.
    """
    levels = np.asarray(levels, dtype=float)
    plateaus = np.clip(np.asarray(plateaus, dtype=float), 1e-6, 1 - 1e-6)

    def resid(u):
        with np.errstate(all="ignore"):
            r = cure_rate(math.exp(u[2]), np.exp(u[0] + u[1] * levels)) - plateaus
        return np.where(np.isfinite(r), r, 1.0)

    starts = [start] if start is not None else []
    for lphi in (-1.0, 0.0, 1.0, 2.0):
        # beta start from the phi-fixed transform of the first and last plateaus
        phi = math.exp(lphi)
        e = np.log(np.maximum(plateaus ** (-phi) - 1.0, 1e-12) / phi)
        b1 = (e[-1] - e[0]) / (levels[-1] - levels[0])
        starts.append(np.array([e[0] - b1 * levels[0], b1, lphi]))
    best = None
    for s in starts:
        res = sopt.least_squares(resid, s, bounds=([-np.inf, -np.inf, -12.0], [np.inf, np.inf, 6.0]),
                                 xtol=1e-14, ftol=1e-14, gtol=1e-14)
        if best is None or res.cost < best.cost:
            best = res
    b0, b1, lphi = best.x
    return float(b0), float(b1), float(math.exp(lphi))


def initial_values(data, km=None, group_column: int = 1, fallback: Params | None = None) -> Params:
    """Data-driven starting values.

    ``(beta0, beta1, phi)`` equate the Kaplan-Meier plateau of each group to
    its model cure rate; ``gamma1`` and a baseline ``gamma2`` come from
    matching Weibull moments to all observed times; ``(alpha0, alpha1)`` match
    the mean observed times of the first and last groups.  Needs at least
    three groups in ``z[:, group_column]``; otherwise ``fallback`` is
    returned.  Remaining covariate coefficients start at zero.
    """
    from .diagnostics import kaplan_meier

    data = as_data(data)
    levels = np.unique(data.z[:, group_column]) if data.z.shape[1] > group_column else np.array([])
    if levels.size < 3:
        if fallback is None:
            raise ValueError("initial_values needs at least three groups or a fallback")
        log.info("fewer than three groups; using the supplied initial values")
        return fallback
    if km is None:
        km = kaplan_meier(data, group_column)
    plateaus = np.array([c.plateau for c in km])
    km_levels = np.array([c.group for c in km], dtype=float)
    b0, b1, phi = solve_cure_equations(km_levels, plateaus)
    g1, _ = weibull_moment_match(data.time.mean(), data.time.var(ddof=1))
    xcol = group_column if data.x.shape[1] > group_column else None
    alpha = np.zeros(data.x.shape[1])
    beta = np.zeros(data.z.shape[1])
    beta[0], beta[group_column] = b0, b1
    lo, hi = levels[0], levels[-1]
    if xcol is not None:
        xl = np.unique(data.x[:, xcol])
        lo, hi = xl[0], xl[-1]
        m_lo = data.time[data.x[:, xcol] == lo].mean()
        m_hi = data.time[data.x[:, xcol] == hi].mean()
        lg_lo = special.gammaln(1 + g1) - math.log(m_lo)
        lg_hi = special.gammaln(1 + g1) - math.log(m_hi)
        alpha[xcol] = (lg_hi - lg_lo) / (hi - lo)
        alpha[0] = lg_lo - alpha[xcol] * lo
    else:
        alpha[0] = special.gammaln(1 + g1) - math.log(data.time.mean())
    return Params(phi=phi, alpha=alpha, beta=beta, gamma1=g1)
