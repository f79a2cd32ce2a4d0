"""Monte Carlo study harness: scenario construction, data generation, aggregation.

Subjects are split into ``groups`` equal-sized groups with covariate value
``j`` (``x = z = (1, j)``).  Group cure rates decrease linearly on the
``log(p0^-phi - 1)`` scale between the targets for the first and last
group; censoring is exponential with a per-group rate solved so that the
overall censoring proportion hits its target.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .distributions import DEFAULT_SEED, RngStream
from .estimators import (
    EmConfig,
    FitError,
    McemConfig,
    SemConfig,
    cure_rate_inference,
    fit_dm,
    fit_em,
    fit_mcem,
    fit_sem,
)
from .likelihood import NumericError
from .model import CureData, Params, cure_rate, weibull_terms
from .optimize import BracketError, OptimConfig, OptimizationError, find_root

__all__ = [
    "ScenarioError",
    "Scenario",
    "McSummary",
    "true_betas",
    "intermediate_cure_rates",
    "solve_censoring_rate",
    "solve_censoring_rates",
    "perturbed_init",
    "generate_dataset",
    "simulate_replicate",
    "run_study",
    "summarize",
]

ALGORITHMS = ("sem", "em", "dm", "mcem")

# stream ids under a study seed
_CENSOR_STREAM = 2**32
_REPLICATE_STREAM = 1


class ScenarioError(ValueError):
    pass


def true_betas(p01: float, p04: float, phi: float, groups: int = 4) -> tuple[float, float]:
    """Regression coefficients giving cure rates ``p01`` (group 1) and ``p04`` (last group)."""
    if not (0 < p04 <= p01 < 1 and phi > 0):
        raise ScenarioError("need 0 < p04 <= p01 < 1 and phi > 0")
    e1 = math.log(p01 ** (-phi) - 1.0)
    e4 = math.log(p04 ** (-phi) - 1.0)
    beta1 = (e4 - e1) / (groups - 1)
    beta0 = e1 + math.log(1.0 / phi) - beta1
    return beta0, beta1


def intermediate_cure_rates(beta0: float, beta1: float, phi: float, levels=(2, 3)):
    return tuple(float(cure_rate(phi, math.exp(beta0 + j * beta1))) for j in levels)


@dataclass
class Scenario:
    n: int = 400
    groups: int = 4
    cure_targets: tuple[float, float] = (0.65, 0.25)
    censor_targets: tuple[float, ...] = (0.85, 0.65, 0.50, 0.35)
    phi: float = 3.0
    gamma1: float = 0.3
    alpha0: float = -1.5
    alpha1: float = 0.5
    replicates: int = 50
    seed: int = DEFAULT_SEED
    censor_draws: int = 10000
    sem: dict = field(default_factory=dict)
    em: dict = field(default_factory=dict)
    mcem: dict = field(default_factory=dict)
    dm: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        self.cure_targets = tuple(float(v) for v in self.cure_targets)
        self.censor_targets = tuple(float(v) for v in self.censor_targets)
        self.validate()

    def validate(self):
        if self.groups < 2:
            raise ScenarioError("need at least two groups")
        if self.n % self.groups:
            raise ScenarioError(f"n={self.n} is not divisible into {self.groups} equal groups")
        if len(self.censor_targets) != self.groups:
            raise ScenarioError("one censoring target per group is required")
        if self.replicates < 1:
            raise ScenarioError("replicates must be >= 1")
        p0 = self.cure_rates()
        bad = [j + 1 for j in range(self.groups) if not (0 < p0[j] < self.censor_targets[j] < 1)]
        if bad:
            detail = ", ".join(
                f"group {j}: cure rate {p0[j - 1]:.4f} vs censoring {self.censor_targets[j - 1]:.4f}" for j in bad
            )
            raise ScenarioError(f"censoring proportion must exceed the cure rate ({detail})")

    def betas(self):
        return true_betas(*self.cure_targets, self.phi, groups=self.groups)

    def cure_rates(self) -> np.ndarray:
        b0, b1 = self.betas()
        return np.array([cure_rate(self.phi, math.exp(b0 + j * b1)) for j in range(1, self.groups + 1)])

    def true_params(self) -> Params:
        b0, b1 = self.betas()
        return Params(phi=self.phi, alpha=[self.alpha0, self.alpha1], beta=[b0, b1], gamma1=self.gamma1)

    def profiles(self):
        return [np.array([1.0, j]) for j in range(1, self.groups + 1)]

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cure_targets"] = list(self.cure_targets)
        d["censor_targets"] = list(self.censor_targets)
        return d


def _censor_residual(xi, e, target, params: Params, group):
    x = np.array([1.0, group])
    gamma2 = math.exp(x @ params.alpha)
    et = math.exp(x @ params.beta)
    f_cdf, _, _, _ = weibull_terms(e / xi, params.gamma1, gamma2)
    sp = np.exp(-np.log1p(params.phi * et * f_cdf) / params.phi)
    return target - sp.mean()


def solve_censoring_rate(group: int, scenario: Scenario, params: Params | None = None, n_draws: int | None = None,
                         rng: RngStream | None = None) -> float:
    """Exponential censoring rate giving group ``group`` its target censoring proportion.

    Censoring times are ``C = E/xi`` for a fixed set of standard exponential
    draws ``E``; the empirical censoring probability ``mean S_p(E/xi)`` is
    matched to the target by bisection.
    """
    params = params or scenario.true_params()
    n_draws = n_draws or scenario.censor_draws
    rng = rng or RngStream(scenario.seed, (_CENSOR_STREAM, group))
    e = rng.generator.standard_exponential(n_draws)
    target = scenario.censor_targets[group - 1]
    g = lambda xi: _censor_residual(xi, e, target, params, group)  # noqa: E731
    lo, hi = 1e-3, 1.0
    for _ in range(200):
        if g(lo) > 0:
            break
        lo /= 4.0
    for _ in range(200):
        if g(hi) < 0:
            break
        hi *= 4.0
    try:
        return find_root(g, lo, hi, tol=1e-12 * hi)
    except BracketError as exc:
        raise ScenarioError(f"cannot bracket the censoring rate for group {group}: {exc}") from exc


def solve_censoring_rates(scenario: Scenario) -> np.ndarray:
    return np.array([solve_censoring_rate(j, scenario) for j in range(1, scenario.groups + 1)])


def generate_dataset(scenario: Scenario, params: Params, xi, rng: RngStream | np.random.Generator) -> CureData:
    """Draw one sample of size ``scenario.n``.

    ``Y`` is the minimum of ``M`` Weibull lifetimes, drawn by inverting
    ``S(y)^M``; subjects with ``M = 0`` are cured and always censored.
    """
    gen = rng.generator if isinstance(rng, RngStream) else rng
    per = scenario.n // scenario.groups
    group = np.repeat(np.arange(1, scenario.groups + 1), per).astype(float)
    x = np.column_stack([np.ones_like(group), group])
    xi = np.asarray(xi, dtype=float)
    c = gen.standard_exponential(scenario.n) / xi[group.astype(int) - 1]
    et = np.exp(x @ params.beta)
    nb_p = 1.0 / (1.0 + params.phi * et)
    lam = gen.gamma(1.0 / params.phi, (1.0 - nb_p) / nb_p)
    m = gen.poisson(lam)
    gamma2 = np.exp(x @ params.alpha)
    v = gen.standard_exponential(scenario.n)
    with np.errstate(divide="ignore"):
        y = np.where(m > 0, (v / np.maximum(m, 1)) ** params.gamma1 / gamma2, np.inf)
    t = np.minimum(y, c)
    delta = (y < c).astype(int)
    data = CureData(t, delta, x, x.copy(), x_names=["intercept", "group"], z_names=["intercept", "group"])
    data.latent = m
    return data


def perturbed_init(truth: Params, gen: np.random.Generator, frac: float = 0.2) -> Params:
    v = truth.to_vector()
    lo, hi = np.minimum(v * (1 - frac), v * (1 + frac)), np.maximum(v * (1 - frac), v * (1 + frac))
    return Params.from_vector(gen.uniform(lo, hi), truth.n_alpha)


def _configs(scenario: Scenario, stream_key):
    sem = dict(scenario.sem)
    mle_rule = sem.pop("mle_rule", "max-loglik")
    em = dict(scenario.em)
    if "phi_grid" in em and isinstance(em["phi_grid"], dict):
        g = em["phi_grid"]
        em["phi_grid"] = tuple(np.round(np.arange(g["lo"], g["hi"] + g["step"] / 2, g["step"]), 10))
    elif "phi_grid" not in em:
        lo, hi = (0.1, 3.0) if scenario.phi < 2 else (1.5, 4.5)
        em["phi_grid"] = tuple(np.round(np.arange(lo, hi + 0.05, 0.1), 10))
    mc = dict(scenario.mcem)
    return {
        "sem": SemConfig(rng=RngStream(scenario.seed, stream_key + (10,)), mle_rule=mle_rule, **sem),
        "em": EmConfig(**em),
        "dm": OptimConfig(**scenario.dm) if scenario.dm else None,
        "mcem": McemConfig(rng=RngStream(scenario.seed, stream_key + (11,)), **mc),
    }


_FITTERS = {"sem": fit_sem, "em": fit_em, "dm": fit_dm, "mcem": fit_mcem}


def simulate_replicate(scenario: Scenario, index: int, algorithms: Sequence[str], xi=None) -> dict:
    """One replicate: generate data, draw a perturbed start, fit every algorithm.

    The returned record is a pure function of ``(scenario, index,
    algorithms)`` apart from the ``cpu_seconds`` entries.
    """
    truth = scenario.true_params()
    if xi is None:
        xi = solve_censoring_rates(scenario)
    key = (_REPLICATE_STREAM, int(index))
    base = RngStream(scenario.seed, key)
    data = generate_dataset(scenario, truth, xi, base.child(0))
    init = perturbed_init(truth, base.child(1).generator)
    cfgs = _configs(scenario, key)
    rec = {
        "replicate": int(index),
        "censored_fraction": float(1 - data.delta.mean()),
        "init": init.to_vector().tolist(),
        "fits": {},
        "cpu_seconds": {},
    }
    for algo in algorithms:
        t0 = time.process_time()
        try:
            fit = _FITTERS[algo](data, init, cfgs[algo])
        except (FitError, OptimizationError, NumericError, FloatingPointError) as exc:
            rec["fits"][algo] = {"failed": True, "error": f"{type(exc).__name__}: {exc}"}
            rec["cpu_seconds"][algo] = time.process_time() - t0
            continue
        cure = []
        if fit.cov is not None:
            cure = [
                {"estimate": c.estimate, "se": c.se}
                for c in cure_rate_inference(fit, scenario.profiles())
            ]
        else:
            cure = [{"estimate": float(cure_rate(fit.params.phi, math.exp(z @ fit.params.beta))), "se": None}
                    for z in scenario.profiles()]
        rec["fits"][algo] = {
            "failed": False,
            "estimates": fit.estimates.tolist(),
            "se": None if fit.se is None else fit.se.tolist(),
            "loglik": fit.loglik,
            "converged": bool(fit.converged),
            "boundary": bool(fit.boundary),
            "cure": cure,
        }
        rec["cpu_seconds"][algo] = time.process_time() - t0
    return rec


def _worker(args):
    scenario_dict, index, algorithms, xi = args
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return simulate_replicate(Scenario.from_dict(scenario_dict), index, algorithms, xi)


@dataclass
class McSummary:
    algorithm: str
    names: list
    truth: np.ndarray
    mean_estimate: np.ndarray
    mean_se: np.ndarray
    bias: np.ndarray
    rmse: np.ndarray
    coverage: np.ndarray
    cure_truth: np.ndarray
    cure_mean: np.ndarray
    cure_mean_se: np.ndarray
    cure_bias: np.ndarray
    cure_rmse: np.ndarray
    cure_coverage: np.ndarray
    n_ok: int
    n_failed: int
    n_no_se: int
    cpu_seconds: float

    def param_rows(self):
        for j, name in enumerate(self.names):
            yield (name, self.truth[j], self.mean_estimate[j], self.mean_se[j], self.bias[j], self.rmse[j],
                   self.coverage[j])

    def cure_rows(self):
        for j in range(self.cure_truth.size):
            yield (f"p0{j + 1}", self.cure_truth[j], self.cure_mean[j], self.cure_mean_se[j], self.cure_bias[j],
                   self.cure_rmse[j], self.cure_coverage[j])


def summarize(records: list[dict], scenario: Scenario, algorithm: str) -> McSummary:
    """Bias, mean model SE, RMSE and Wald coverage over the successful replicates.

    Coverage and mean SE use only replicates where the observed information
    was invertible; those counts are reported alongside.
    """
    truth = scenario.true_params()
    tv = truth.to_vector()
    ctruth = scenario.cure_rates()
    fits = [r["fits"][algorithm] for r in sorted(records, key=lambda r: r["replicate"]) if algorithm in r["fits"]]
    ok = [f for f in fits if not f["failed"]]
    n_failed = len(fits) - len(ok)
    cpu = float(sum(r["cpu_seconds"].get(algorithm, 0.0) for r in records))
    if not ok:
        nan = np.full(tv.size, np.nan)
        cn = np.full(ctruth.size, np.nan)
        return McSummary(algorithm, truth.names(), tv, nan, nan, nan, nan, nan, ctruth, cn, cn, cn, cn, cn,
                         0, n_failed, 0, cpu)
    with_se = [f for f in ok if f["se"] is not None]
    est = np.array([f["estimates"] for f in ok])
    mean_est = est.mean(axis=0)
    bias = mean_est - tv
    rmse = np.sqrt(((est - tv) ** 2).mean(axis=0))
    if with_se:
        e_se = np.array([f["estimates"] for f in with_se])
        s_se = np.array([f["se"] for f in with_se])
        mean_se = s_se.mean(axis=0)
        cover = (np.abs(e_se - tv) <= 1.959963984540054 * s_se).mean(axis=0)
    else:
        mean_se = np.full(tv.size, np.nan)
        cover = np.full(tv.size, np.nan)
    cest = np.array([[c["estimate"] for c in f["cure"]] for f in ok])
    cmean = cest.mean(axis=0)
    cbias = cmean - ctruth
    crmse = np.sqrt(((cest - ctruth) ** 2).mean(axis=0))
    if with_se:
        ce = np.array([[c["estimate"] for c in f["cure"]] for f in with_se])
        cs = np.array([[c["se"] for c in f["cure"]] for f in with_se])
        cmse = cs.mean(axis=0)
        ccov = (np.abs(ce - ctruth) <= 1.959963984540054 * cs).mean(axis=0)
    else:
        cmse = np.full(ctruth.size, np.nan)
        ccov = np.full(ctruth.size, np.nan)
    return McSummary(
        algorithm, truth.names(), tv, mean_est, mean_se, bias, rmse, cover,
        ctruth, cmean, cmse, cbias, crmse, ccov,
        len(ok), n_failed, len(ok) - len(with_se), cpu,
    )


def run_study(scenario: Scenario, algorithms: Sequence[str] = ("sem",), replicates: int | None = None,
              jobs: int = 1) -> tuple[dict[str, McSummary], list[dict]]:
    """Run ``replicates`` independent replicates and summarize per algorithm.

    Replicate ``k`` draws everything from streams keyed by ``(seed, k)``, so
    serial and parallel runs produce the same records.
    """
    algorithms = list(algorithms)
    bad = [a for a in algorithms if a not in ALGORITHMS]
    if bad:
        raise ValueError(f"unknown algorithms: {bad}")
    reps = replicates if replicates is not None else scenario.replicates
    xi = solve_censoring_rates(scenario)
    if jobs <= 1:
        records = [simulate_replicate(scenario, k, algorithms, xi) for k in range(reps)]
    else:
        d = scenario.to_dict()
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            records = list(ex.map(_worker, [(d, k, algorithms, xi) for k in range(reps)]))
    records.sort(key=lambda r: r["replicate"])
    return {a: summarize(records, scenario, a) for a in algorithms}, records
