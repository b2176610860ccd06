"""Standard errors and Wald tests for the regression coefficients.

The observed information is the negated central-difference Hessian of the
observed-data log-likelihood with respect to the stacked regression
matrices; weights and covariance factors are held at their estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .data import PanelDataset
from .em import MixtureParams, log_likelihood
from .exceptions import DomainError, InferenceError

DEFAULT_REL_STEP = 1e-5


def _steps(x: np.ndarray, rel_step: float) -> np.ndarray:
    return rel_step * np.maximum(1.0, np.abs(x))


def numerical_gradient(f, x, rel_step: float = DEFAULT_REL_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    h = _steps(x, rel_step)
    g = np.empty_like(x)
    for r in range(x.size):
        e = np.zeros_like(x)
        e[r] = h[r]
        g[r] = (f(x + e) - f(x - e)) / (2 * h[r])
    return g


def numerical_hessian(f, x, rel_step: float = DEFAULT_REL_STEP) -> np.ndarray:
    """Central-difference Hessian with steps ``rel_step * max(1, |x_r|)``, symmetrised."""
    x = np.asarray(x, dtype=float)
    d = x.size
    h = _steps(x, rel_step)
    f0 = f(x)
    H = np.empty((d, d))
    E = np.diag(h)
    for r in range(d):
        H[r, r] = (f(x + 2 * E[r]) - 2 * f0 + f(x - 2 * E[r])) / (4 * h[r] ** 2)
        for c in range(r):
            H[r, c] = (
                f(x + E[r] + E[c]) - f(x + E[r] - E[c]) - f(x - E[r] + E[c]) + f(x - E[r] - E[c])
            ) / (4 * h[r] * h[c])
            H[c, r] = H[r, c]
    return 0.5 * (H + H.T)


def coefficient_loglik(data: PanelDataset, params: MixtureParams):
    """``f(theta_flat)``: log-likelihood as a function of the stacked regression matrices only."""
    shape = params.theta.shape

    def f(flat):
        return log_likelihood(data, replace(params, theta=np.asarray(flat).reshape(shape)))

    return f


def observed_information(data: PanelDataset, params: MixtureParams, rel_step: float = DEFAULT_REL_STEP) -> np.ndarray:
    """``-H`` over the regression coefficients, ordered as ``params.theta.ravel()``."""
    H = numerical_hessian(coefficient_loglik(data, params), params.theta.ravel(), rel_step)
    return -H


def standard_errors(info: np.ndarray) -> np.ndarray:
    """Square roots of the diagonal of ``info^{-1}``; refuses a non-PD information matrix."""
    info = 0.5 * (info + info.T)
    try:
        L = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise InferenceError(
            "observed information is not positive definite (unconverged fit or saddle point)"
        ) from None
    Linv = np.linalg.inv(L)
    return np.sqrt(np.sum(Linv**2, axis=0))


def wald(estimate: float, se: float) -> tuple[float, float, float]:
    """``(z, p_one_sided, p_two_sided)`` with ``p_one_sided = 1 - Phi(|z|)``."""
    if not se > 0:
        raise DomainError(f"standard error must be positive, got {se}")
    z = estimate / se
    p1 = float(stats.norm.sf(abs(z)))
    return float(z), p1, 2.0 * p1


@dataclass(frozen=True)
class WaldRow:
    component: int
    term: str
    kind: str  # "intercept" or "covariate"
    response: str
    estimate: float
    se: float
    z: float
    p_one_sided: float
    p_two_sided: float


@dataclass
class WaldReport:
    rows: list
    rel_step: float = DEFAULT_REL_STEP
    notes: list = field(default_factory=list)

    def covariate_rows(self) -> list:
        return [r for r in self.rows if r.kind == "covariate"]


def wald_report(data: PanelDataset, params: MixtureParams, rel_step: float = DEFAULT_REL_STEP) -> WaldReport:
    info = observed_information(data, params, rel_step)
    se = standard_errors(info).reshape(params.theta.shape)
    terms = [(f"intercept[{t}]", "intercept") for t in data.time_labels]
    terms += [(c, "covariate") for c in data.covariate_names]
    rows = []
    for i in range(params.k):
        for r, (term, kind) in enumerate(terms):
            for h, resp in enumerate(data.response_names):
                est = float(params.theta[i, r, h])
                z, p1, p2 = wald(est, float(se[i, r, h]))
                rows.append(WaldRow(i, term, kind, resp, est, float(se[i, r, h]), z, p1, p2))
    return WaldReport(rows, rel_step)
