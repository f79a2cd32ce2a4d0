"""Derivative-free maximization, bracketing root-finding and numerical Hessians."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "OptimConfig",
    "OptimResult",
    "OptimizationError",
    "BracketError",
    "maximize",
    "maximize_newton",
    "find_root",
    "numeric_hessian",
]


class OptimizationError(RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class BracketError(ValueError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    max_iters: int = 5000
    x_tol: float = 1e-8
    f_tol: float = 1e-10
    restarts: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.x_tol > 0 and self.f_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")


@dataclass
class OptimResult:
    argmax: np.ndarray
    value: float
    iterations: int
    converged: bool
    evaluations: int = 0


def _nelder_mead(fun, x0, cfg: OptimConfig):
    """Minimize ``fun`` from ``x0``; non-finite values count as +inf."""
    n = x0.size
    sim = np.empty((n + 1, n))
    sim[0] = x0
    for j in range(n):
        v = x0.copy()
        v[j] += max(0.1, 0.1 * abs(x0[j]))
        sim[j + 1] = v
    nfev = 0

    def f(x):
        nonlocal nfev
        nfev += 1
        val = fun(x)
        return val if np.isfinite(val) else np.inf

    fs = np.array([f(v) for v in sim])
    it = 0
    converged = False
    while it < cfg.max_iters:
        order = np.argsort(fs, kind="stable")
        sim = sim[order]
        fs = fs[order]
        if (
            np.abs(fs[1:] - fs[0]).max() <= cfg.f_tol
            and np.abs(sim[1:] - sim[0]).max() <= cfg.x_tol
        ):
            converged = True
            break
        it += 1
        centroid = sim[:-1].sum(axis=0) / n
        worst = sim[-1]
        xr = centroid + (centroid - worst)
        fr = f(xr)
        if fr < fs[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = f(xe)
            if fe < fr:
                sim[-1], fs[-1] = xe, fe
            else:
                sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-2]:
            sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            fc = f(xc)
            if fc <= fr:
                sim[-1], fs[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (worst - centroid)
            fc = f(xc)
            if fc < fs[-1]:
                sim[-1], fs[-1] = xc, fc
                continue
        sim[1:] = sim[0] + 0.5 * (sim[1:] - sim[0])
        fs[1:] = [f(v) for v in sim[1:]]
    best = int(np.argmin(fs))
    return sim[best].copy(), float(fs[best]), it, converged, nfev


def maximize(objective: Callable[[np.ndarray], float], start, cfg: OptimConfig | None = None) -> OptimResult:
    """Nelder-Mead ascent of ``objective`` from ``start``.

    The start vertex stays in the simplex until it is beaten, so the returned
    value is never below ``objective(start)``.  With ``cfg.restarts > 0`` the
    search is re-run from the best point with a fresh simplex.
    """
    cfg = cfg or OptimConfig()
    x0 = np.array(start, dtype=float).reshape(-1)
    f0 = objective(x0)
    if not np.isfinite(f0):
        raise OptimizationError("objective is not finite at the start point", best=x0)
    neg = lambda x: -objective(x)  # noqa: E731
    x, fval, iters, conv, nfev = _nelder_mead(neg, x0, cfg)
    for _ in range(cfg.restarts):
        x2, f2, it2, conv, nf2 = _nelder_mead(neg, x, cfg)
        iters += it2
        nfev += nf2
        improved = f2 < fval - cfg.f_tol
        if f2 <= fval:
            x, fval = x2, f2
        if not improved:
            break
    if not fval <= -f0:
        x, fval = x0, -f0
    return OptimResult(argmax=x, value=-fval, iterations=iters, converged=conv, evaluations=nfev + 1)


def maximize_newton(fgh: Callable[[np.ndarray], tuple], start, tol: float = 1e-12, max_iters: int = 100,
                    max_damping_steps: int = 40, lower=None, upper=None) -> OptimResult:
    """Damped Newton ascent using the value, gradient and Hessian from ``fgh``.

    The step solves ``(-H + lam I) s = g``; ``lam`` grows until ``-H + lam I``
    is positive definite and the step increases the objective, so every
    accepted iterate improves on the last.  Optional box bounds are handled
    by projection, holding coordinates whose gradient points out of the box
    fixed.  Stops once the Newton decrement ``g' s / 2`` falls below
    ``tol * max(1, |f|)``.
    """
    x = np.array(start, dtype=float).reshape(-1)
    n = x.size
    lo = np.full(n, -np.inf) if lower is None else np.broadcast_to(np.asarray(lower, dtype=float), (n,))
    hi = np.full(n, np.inf) if upper is None else np.broadcast_to(np.asarray(upper, dtype=float), (n,))
    x = np.clip(x, lo, hi)
    f, g, H = fgh(x)
    if not np.isfinite(f):
        raise OptimizationError("objective is not finite at the start point", best=x)
    lam = 0.0
    nfev = 1
    for it in range(1, max_iters + 1):
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
            raise OptimizationError("non-finite derivatives", best=x)
        free = ~(((x <= lo) & (g < 0)) | ((x >= hi) & (g > 0)))
        gf = g[free]
        Hf = H[np.ix_(free, free)]
        scale = max(1e-8, float(np.max(np.abs(np.diag(Hf))))) if gf.size else 1.0
        eye = np.eye(gf.size)
        for _ in range(max_damping_steps):
            if gf.size == 0:
                return OptimResult(argmax=x, value=float(f), iterations=it, converged=True, evaluations=nfev)
            try:
                c = np.linalg.cholesky(-Hf + lam * scale * eye)
            except np.linalg.LinAlgError:
                lam = max(10.0 * lam, 1e-6)
                continue
            step = np.linalg.solve(c.T, np.linalg.solve(c, gf))
            dec = 0.5 * float(gf @ step)
            if dec <= tol * max(1.0, abs(f)):
                return OptimResult(argmax=x, value=float(f), iterations=it, converged=True, evaluations=nfev)
            xn = x.copy()
            xn[free] += step
            xn = np.clip(xn, lo, hi)
            fn, gn, Hn = fgh(xn)
            nfev += 1
            if np.isfinite(fn) and fn >= f:
                x, f, g, H = xn, fn, gn, Hn
                lam = lam / 10.0 if lam > 1e-6 else 0.0
                break
            lam = max(10.0 * lam, 1e-6)
        else:
            return OptimResult(argmax=x, value=float(f), iterations=it, converged=False, evaluations=nfev)
    return OptimResult(argmax=x, value=float(f), iterations=max_iters, converged=False, evaluations=nfev)


def find_root(g: Callable[[float], float], lo: float, hi: float, tol: float = 1e-10, max_iters: int = 400) -> float:
    """Bisection on a sign-changing bracket.

    Returns the final midpoint unless an earlier midpoint had a smaller
    ``|g|``.  Tighter ``tol`` visits a superset of the same midpoints, so the
    returned residual never grows as ``tol`` shrinks.
    """
    glo, ghi = g(lo), g(hi)
    if glo == 0:
        return float(lo)
    if ghi == 0:
        return float(hi)
    if glo * ghi > 0:
        raise BracketError(f"no sign change on [{lo}, {hi}]: g(lo)={glo}, g(hi)={ghi}")
    best, best_abs = None, np.inf
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if abs(gm) < best_abs:
            best, best_abs = mid, abs(gm)
        if gm == 0 or abs(hi - lo) < tol:
            break
        if (gm < 0) == (glo < 0):
            lo, glo = mid, gm
        else:
            hi = mid
    return float(best)


def numeric_hessian(f: Callable[[np.ndarray], float], x0, h=None) -> np.ndarray:
    """Central-difference Hessian, symmetrized.

    Default steps are ``1e-4 * max(1, |x0_j|)``.
    """
    x0 = np.array(x0, dtype=float).reshape(-1)
    n = x0.size
    if h is None:
        h = 1e-4 * np.maximum(1.0, np.abs(x0))
    h = np.broadcast_to(np.asarray(h, dtype=float), (n,))
    f0 = f(x0)
    H = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        fp, fm = f(x0 + ei), f(x0 - ei)
        H[i, i] = (fp - 2.0 * f0 + fm) / h[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h[j]
            fpp = f(x0 + ei + ej)
            fpm = f(x0 + ei - ej)
            fmp = f(x0 - ei + ej)
            fmm = f(x0 - ei - ej)
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
    bad = np.argwhere(~np.isfinite(H))
    if bad.size:
        i, j = bad[0]
        raise ValueError(f"non-finite Hessian entry at coordinates ({i}, {j})")
    return 0.5 * (H + H.T)
