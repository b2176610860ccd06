"""Covariance pattern family: codes, parameter counts and constrained M-step projections.

Response (``Omega``) patterns follow the usual volume/shape/orientation
nomenclature: ``VVV``, ``EEE``, ``III``, ``VVI``, ``EEI``, ``VII``, ``EII``.
Temporal (``Phi``) patterns are ``GAR``, ``GARI`` (isotropic innovations),
``EGAR`` (shared across components) and ``EGARI``; the nontemporal case is
any of them with ``m = 0``.

Identifiability: every ``Omega_i`` is scaled to trace ``p``.  When the
paired temporal factor is free to absorb the scale, the rescaling is
compensated on ``D`` and leaves ``Phi (x) Omega`` unchanged.  When several
components with their own ``Omega_i`` share one ``Phi`` the trace constraint
is a genuine restriction and ``Omega_i`` is maximised under it directly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize

from .exceptions import DegenerateError, PatternError
from .matnorm import TemporalCholesky, banded_regression

OMEGA_PATTERNS = ("VVV", "EEE", "III", "VVI", "EEI", "VII", "EII")
PHI_PATTERNS = ("GAR", "GARI", "EGAR", "EGARI")

OMEGA_SHARED = {"EEE", "EEI", "EII", "III"}
OMEGA_DIAGONAL = {"VVI", "EEI"}
OMEGA_SPHERICAL = {"VII", "EII"}

EIG_TOL = 1e-10
D_TOL = 1e-12


def check_omega_pattern(code: str) -> str:
    code = str(code).upper()
    if code == "EEV":
        raise PatternError(
            "Omega pattern EEV (ellipsoidal, equal volume and shape) is not supported: "
            "its M-step needs an iterative eigenstructure update"
        )
    if code not in OMEGA_PATTERNS:
        raise PatternError(f"unknown Omega pattern {code!r}; expected one of {', '.join(OMEGA_PATTERNS)}")
    return code


def check_phi_pattern(code: str) -> str:
    code = str(code).upper()
    if code not in PHI_PATTERNS:
        raise PatternError(f"unknown Phi pattern {code!r}; expected one of {', '.join(PHI_PATTERNS)}")
    return code


def phi_shared(code: str) -> bool:
    return code in ("EGAR", "EGARI")


def phi_isotropic(code: str) -> bool:
    return code in ("GARI", "EGARI")


@dataclass(frozen=True)
class ModelSpec:
    """Coordinates of one member of the model family."""

    k: int
    omega: str
    phi: str
    m: int
    T: int
    p: int
    q: int = 0
    with_covariates: bool = False

    def __post_init__(self):
        object.__setattr__(self, "omega", check_omega_pattern(self.omega))
        object.__setattr__(self, "phi", check_phi_pattern(self.phi))
        for name in ("k", "T", "p"):
            if int(getattr(self, name)) < 1:
                raise PatternError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.q < 0:
            raise PatternError(f"q must be >= 0, got {self.q}")
        if not self.with_covariates and self.q != 0:
            raise PatternError("q must be 0 when with_covariates is false")
        if not 0 <= self.m <= self.T - 1:
            raise PatternError(f"GAR order m={self.m} outside 0..{self.T - 1}")

    @property
    def label(self) -> str:
        cov = "cov" if self.with_covariates else "nocov"
        return f"k={self.k} {self.phi}(m={self.m}) {self.omega} {cov}"

    def with_k(self, k: int) -> "ModelSpec":
        return replace(self, k=k)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "omega": self.omega,
            "phi": self.phi,
            "m": self.m,
            "T": self.T,
            "p": self.p,
            "q": self.q,
            "with_covariates": self.with_covariates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def ar_count(T: int, m: int) -> int:
    """Number of free autoregressive entries in a banded ``U`` of order ``m``."""
    return T * (T - 1) // 2 - (T - m - 1) * (T - m) // 2


def temporal_param_count(phi: str, k: int, T: int, m: int) -> int:
    phi = check_phi_pattern(phi)
    a = ar_count(T, m)
    return {
        "GAR": k * T + k * a,
        "GARI": k + k * a,
        "EGAR": T + a,
        "EGARI": 1 + a,
    }[phi]


def omega_param_count(omega: str, k: int, p: int) -> int:
    omega = check_omega_pattern(omega)
    return {
        "VVV": k * p * (p + 1) // 2,
        "EEE": p * (p + 1) // 2,
        "III": 0,
        "VVI": k * p,
        "EEI": p,
        "VII": k,
        "EII": 1,
    }[omega]


def trace_constraints(omega: str, k: int) -> int:
    """One trace-``p`` constraint per distinct free ``Omega``; none for the fixed identity."""
    omega = check_omega_pattern(omega)
    if omega == "III":
        return 0
    return 1 if omega in OMEGA_SHARED else k


def param_count(spec: ModelSpec) -> int:
    """Free parameters: weights, regression matrices, temporal and response covariances."""
    T, p, q, k = spec.T, spec.p, spec.q, spec.k
    return (
        (k - 1)
        + k * (T + q) * p
        + temporal_param_count(spec.phi, k, T, spec.m)
        + omega_param_count(spec.omega, k, p)
        - trace_constraints(spec.omega, k)
    )


# ---------------------------------------------------------------------------
# Omega projections


def _check_spd(A: np.ndarray, what: str) -> None:
    w = np.linalg.eigvalsh(A)
    if not np.all(np.isfinite(w)) or w[0] <= EIG_TOL:
        raise DegenerateError(f"{what} lost positive definiteness (min eigenvalue {w[0]:.3g})")


def _trace_constrained_eigs(w: np.ndarray, target: float) -> np.ndarray:
    """Maximise ``sum(-log x - w / x)`` subject to ``sum(x) = target``, ``x > 0``.

    Every stationary point puts each ``x_h`` on a root of
    ``lam x^2 + x - w_h = 0`` for a common multiplier ``lam``, with at most
    one coordinate on the larger root.  All such candidates are bracketed on
    a grid of the multiplier and the best one is returned.
    """
    w = np.asarray(w, dtype=float)
    if w.size == 1:
        return np.array([float(target)])
    if np.min(w) <= EIG_TOL * max(1.0, float(np.max(w))):
        raise DegenerateError("response scatter is singular")

    def objective(x):
        return float(np.sum(-np.log(x) - w / x))

    if w.sum() >= target:
        # multiplier >= 0: single root on the small branch, decreasing in lam
        def g(lam):
            return float(np.sum(2.0 * w / (1.0 + np.sqrt(1.0 + 4.0 * lam * w)))) - target

        hi = 1.0
        while g(hi) > 0:
            hi *= 4.0
        lam = optimize.brentq(g, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps) if g(0.0) > 0 else 0.0
        return 2.0 * w / (1.0 + np.sqrt(1.0 + 4.0 * lam * w))

    # multiplier -mu < 0, mu in (0, 1 / (4 max w)]
    mu_max = 1.0 / (4.0 * float(np.max(w)))

    def branches(mu, big):
        root = np.sqrt(np.maximum(1.0 - 4.0 * mu * w, 0.0))
        x = 2.0 * w / (1.0 + root)
        if big is not None:
            x[big] = (1.0 + root[big]) / (2.0 * mu)
        return x

    grid = mu_max * np.concatenate([np.geomspace(1e-14, 1e-3, 60), np.linspace(1e-3, 1.0, 400)[1:]])
    root = np.sqrt(np.maximum(1.0 - 4.0 * grid[:, None] * w[None, :], 0.0))
    small = 2.0 * w[None, :] / (1.0 + root)
    large = (1.0 + root) / (2.0 * grid[:, None])
    total_small = small.sum(axis=1)
    candidates = []
    for big in [None, *range(w.size)]:
        vals = total_small - target
        if big is not None:
            vals = vals - small[:, big] + large[:, big]
        for i in np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)[0]:
            if vals[i] == 0.0:
                candidates.append(branches(grid[i], big))
                continue
            if vals[i + 1] == 0.0:
                continue
            mu = optimize.brentq(
                lambda u: branches(u, big).sum() - target,
                grid[i],
                grid[i + 1],
                xtol=1e-300,
                rtol=4 * np.finfo(float).eps,
            )
            candidates.append(branches(mu, big))
    if not candidates:
        raise DegenerateError("trace-constrained response covariance update has no solution")
    best = max(candidates, key=objective)
    return best * (target / best.sum())


def trace_constrained_omega(W: np.ndarray, pattern: str) -> np.ndarray:
    """Maximise ``-log|Omega| - tr(Omega^{-1} W)`` over trace-``p`` matrices of a varying pattern."""
    p = W.shape[0]
    if pattern in OMEGA_SPHERICAL or pattern == "III":
        return np.eye(p)
    if pattern in OMEGA_DIAGONAL:
        return np.diag(_trace_constrained_eigs(np.diag(W).copy(), p))
    vals, vecs = np.linalg.eigh(0.5 * (W + W.T))
    x = _trace_constrained_eigs(vals, p)
    out = (vecs * x) @ vecs.T
    return 0.5 * (out + out.T)


def project_omega(scatters, masses, pattern: str, shared_temporal: bool = False):
    """Constrained ``Omega`` update from the per-component unconstrained estimates.

    ``scatters[i]`` is the weighted ``p x p`` response scatter (the VVV
    solution) of component ``i`` and ``masses[i]`` its posterior mass.
    Returns ``(omegas, scales)``: trace-``p`` matrices and the factor applied to
    each projected matrix to reach trace ``p``.  The caller divides the paired
    ``D`` by that factor.  With ``shared_temporal`` and a varying pattern the
    trace constraint is imposed inside the maximisation and every scale is 1.
    """
    pattern = check_omega_pattern(pattern)
    scatters = [np.asarray(S, dtype=float) for S in scatters]
    masses = np.asarray(masses, dtype=float)
    k = len(scatters)
    p = scatters[0].shape[0]
    if np.any(masses <= 0):
        raise DegenerateError("component with zero posterior mass")

    if pattern == "III":
        return [np.eye(p) for _ in range(k)], np.ones(k)

    if shared_temporal and k > 1 and pattern not in OMEGA_SHARED:
        omegas = [trace_constrained_omega(S, pattern) for S in scatters]
        for O in omegas:
            _check_spd(O, "Omega")
        return omegas, np.ones(k)

    if pattern in OMEGA_SHARED:
        pooled = sum(n * S for n, S in zip(masses, scatters)) / masses.sum()
        base = [pooled]
    else:
        base = scatters
    projected = []
    for S in base:
        if pattern in OMEGA_DIAGONAL:
            S = np.diag(np.diag(S))
        elif pattern in OMEGA_SPHERICAL:
            S = (np.trace(S) / p) * np.eye(p)
        projected.append(0.5 * (S + S.T))
    omegas, scales = [], []
    for S in projected:
        _check_spd(S, "Omega")
        c = p / np.trace(S)
        omegas.append(S * c)
        scales.append(c)
    if pattern in OMEGA_SHARED:
        return [omegas[0]] * k, np.full(k, scales[0])
    return omegas, np.asarray(scales)


# ---------------------------------------------------------------------------
# Temporal projections


def _fit_cholesky(S: np.ndarray, m: int, p: int, isotropic: bool) -> TemporalCholesky:
    U = banded_regression(S, m)
    D = np.einsum("ts,su,tu->t", U, S, U) / p
    if isotropic:
        D = np.full_like(D, D.mean())
    if not np.all(np.isfinite(D)) or np.min(D) <= D_TOL * max(1.0, float(np.max(np.abs(D)))):
        raise DegenerateError("innovation variance collapsed to zero")
    return TemporalCholesky(U, D, m)


def project_temporal(scatters, masses, pattern: str, m: int, p: int) -> list[TemporalCholesky]:
    """Temporal M-step: banded regressions on each (or the pooled) scatter.

    ``scatters[i]`` is the ``T x T`` Omega-sandwiched residual scatter of
    component ``i``.  ``D = diag(U S U') / p``; isotropic patterns replace it
    by its mean.  Shared patterns pool the scatters by mass and return the
    same factor object for every component.
    """
    pattern = check_phi_pattern(pattern)
    scatters = [np.asarray(S, dtype=float) for S in scatters]
    masses = np.asarray(masses, dtype=float)
    if np.any(masses <= 0):
        raise DegenerateError("component with zero posterior mass")
    iso = phi_isotropic(pattern)
    if phi_shared(pattern):
        pooled = sum(n * S for n, S in zip(masses, scatters)) / masses.sum()
        chol = _fit_cholesky(pooled, m, p, iso)
        return [chol] * len(scatters)
    return [_fit_cholesky(S, m, p, iso) for S in scatters]
