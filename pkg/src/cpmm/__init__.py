"""Covariance pattern mixture models for balanced multivariate longitudinal data."""

from __future__ import annotations

from .data import PanelDataset, ingest, write_long_csv
from .em import FitConfig, FitResult, MixtureParams, e_step, fit, log_likelihood, predict, rmsd
from .exceptions import (
    BalanceError,
    ConfigError,
    CPMMError,
    DataError,
    DegenerateError,
    DomainError,
    DuplicateRecordError,
    FitError,
    InferenceError,
    ParseError,
    PatternError,
)
from .infer import observed_information, standard_errors, wald, wald_report
from .matnorm import TemporalCholesky, compose_phi, decompose_phi, kron_oracle, log_density
from .patterns import OMEGA_PATTERNS, PHI_PATTERNS, ModelSpec, param_count
from .select import GridSpec, aic, bic, grid_search
from .sim import adjusted_rand_index, generate_dataset, recovery_report, scenario_params

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
