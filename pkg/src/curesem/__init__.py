"""Maximum-likelihood fitting of the negative binomial competing-risks cure rate model."""

from .distributions import DEFAULT_SEED, DomainError, RngStream
from .estimators import (
    EmConfig,
    FitError,
    FitResult,
    McemConfig,
    SemConfig,
    cure_rate_inference,
    fit_dm,
    fit_em,
    fit_mcem,
    fit_sem,
    initial_values,
)
from .likelihood import NumericError, observed_loglik
from .model import CureData, Params, cure_rate

__version__ = "0.1.0"
