"""Synthetic panels from a known mixture and recovery scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import comb

from .data import PanelDataset
from .em import FitResult, MixtureParams
from .exceptions import DomainError
from .matnorm import TemporalCholesky, compose_phi, sample_errors
from .patterns import ModelSpec, phi_isotropic, phi_shared


def default_covariate_sampler(binary: int = 0):
    """Standard normal covariates; the first ``binary`` columns are time-constant 0/1 draws."""

    def draw(rng: np.random.Generator, n: int, T: int, q: int) -> np.ndarray:
        X = rng.standard_normal((n, T, q))
        nb = min(binary, q)
        if nb:
            X[:, :, :nb] = rng.integers(0, 2, size=(n, 1, nb)).astype(float)
        return X

    return draw


@dataclass(frozen=True)
class TruthBundle:
    params: MixtureParams
    labels: np.ndarray
    seed: int | None


def generate_dataset(params: MixtureParams, covariate_sampler=None, n: int = 100, seed=None):
    """Draw ``n`` subjects: label from the weights, covariates, then ``X~ Theta_i + E``."""
    if n < 1:
        raise DomainError("n must be >= 1")
    spec = params.spec
    rng = np.random.default_rng(seed)
    labels = rng.choice(spec.k, size=n, p=params.weights)
    sampler = covariate_sampler or default_covariate_sampler()
    X = sampler(rng, n, spec.T, spec.q) if spec.q else np.zeros((n, spec.T, 0))
    design = np.concatenate([np.broadcast_to(np.eye(spec.T), (n, spec.T, spec.T)), X], axis=2)
    Y = np.einsum("jtc,jch->jth", design, params.theta[labels])
    for i in range(spec.k):
        idx = np.nonzero(labels == i)[0]
        if idx.size:
            Y[idx] += sample_errors(params.chols[i], params.omegas[i], rng, idx.size)
    data = PanelDataset(Y, X)
    return data, TruthBundle(params, labels, seed)


def scenario_params(
    k: int,
    T: int,
    p: int,
    q: int = 0,
    m: int = 1,
    phi: str = "GAR",
    omega: str = "VVV",
    rho: float = 0.5,
    innovation: float = 0.5,
    separation: float = 5.0,
    seed=0,
) -> MixtureParams:
    """Ground-truth parameters for a simulation scenario.

    Component intercept paths are offset by ``separation`` marginal standard
    deviations; covariate effects are standard normal; ``U`` carries
    ``-rho`` on each of its ``m`` subdiagonals (scaled by ``1/m``) and
    ``D = innovation`` (time-varying unless the pattern is isotropic).
    """
    rng = np.random.default_rng(seed)
    spec = ModelSpec(k, omega, phi, m, T, p, q, q > 0)

    def make_chol():
        U = np.eye(T)
        for lag in range(1, m + 1):
            U -= np.diag(np.full(T - lag, rho / m), -lag)
        D = np.full(T, innovation)
        if not phi_isotropic(phi):
            D = D * rng.uniform(0.8, 1.2, size=T)
        return TemporalCholesky(U, D, m)

    def make_omega():
        if omega == "III" or omega in ("VII", "EII"):
            return np.eye(p)
        A = rng.normal(size=(p, p)) * 0.4
        O = A @ A.T + np.eye(p)
        if omega in ("VVI", "EEI"):
            O = np.diag(np.diag(O))
        return O * p / np.trace(O)

    chols = [make_chol()] * k if phi_shared(phi) else [make_chol() for _ in range(k)]
    omegas = [make_omega()] * k if omega in ("EEE", "EEI", "EII", "III") else [make_omega() for _ in range(k)]
    sd = max(np.sqrt(np.max(np.diag(compose_phi(c))) * np.max(np.diag(o))) for c, o in zip(chols, omegas))
    theta = np.zeros((k, T + q, p))
    base = rng.normal(size=(T, p)) * sd
    for i in range(k):
        theta[i, :T] = base + i * separation * sd
        theta[i, T:] = rng.normal(size=(q, p))
    weights = np.full(k, 1.0 / k)
    return MixtureParams(spec, weights, theta, tuple(chols), np.array(omegas))


def adjusted_rand_index(a, b) -> float:
    """Pair-counting adjusted Rand index."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DomainError("label vectors must have equal length")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    sum_ij = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    total = comb(n, 2)
    expected = sum_a * sum_b / total if total else 0.0
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        return 1.0
    return float((sum_ij - expected) / (maximum - expected))


@dataclass(frozen=True)
class RecoveryReport:
    ari: float
    label_accuracy: float
    true_k: int
    fitted_k: int
    selected_k_correct: bool
    permutation: tuple | None
    rmse_regression: float | None
    rmse_rho: float | None
    rmse_D: float | None
    rmse_omega: float | None

    def to_dict(self) -> dict:
        return {
            "ari": self.ari,
            "label_accuracy": self.label_accuracy,
            "true_k": self.true_k,
            "fitted_k": self.fitted_k,
            "selected_k_correct": self.selected_k_correct,
            "permutation": list(self.permutation) if self.permutation is not None else None,
            "rmse": {
                "regression": self.rmse_regression,
                "rho": self.rmse_rho,
                "D": self.rmse_D,
                "omega": self.rmse_omega,
            },
        }


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def recovery_report(truth: TruthBundle, fit: FitResult, selected_spec: ModelSpec | None = None) -> RecoveryReport:
    """Align fitted components to the truth by maximum label agreement, then score."""
    true_k = truth.params.k
    fitted = fit.params
    labels = np.asarray(fit.map_labels)
    if labels.shape != truth.labels.shape:
        raise DomainError("fit and truth refer to different datasets")
    conf = np.zeros((true_k, fitted.k), dtype=np.int64)
    np.add.at(conf, (truth.labels, labels), 1)
    rows, cols = linear_sum_assignment(conf, maximize=True)
    accuracy = float(conf[rows, cols].sum() / labels.size)
    ari = adjusted_rand_index(truth.labels, labels)
    sel_k = (selected_spec or fitted.spec).k
    blocks = dict(rmse_regression=None, rmse_rho=None, rmse_D=None, rmse_omega=None)
    perm = None
    if fitted.k == true_k:
        perm = tuple(int(c) for c in cols[np.argsort(rows)])
        aligned = fitted.permuted(perm)
        T = truth.params.spec.T
        low = np.tril_indices(T, -1)
        if aligned.theta.shape == truth.params.theta.shape:
            blocks["rmse_regression"] = _rmse(aligned.theta, truth.params.theta)
        blocks["rmse_rho"] = _rmse(
            [c.U[low] for c in aligned.chols], [c.U[low] for c in truth.params.chols]
        ) if T > 1 else 0.0
        blocks["rmse_D"] = _rmse([c.D for c in aligned.chols], [c.D for c in truth.params.chols])
        blocks["rmse_omega"] = _rmse(aligned.omegas, truth.params.omegas)
    return RecoveryReport(
        ari=ari,
        label_accuracy=accuracy,
        true_k=true_k,
        fitted_k=fitted.k,
        selected_k_correct=sel_k == true_k,
        permutation=perm,
        **blocks,
    )
