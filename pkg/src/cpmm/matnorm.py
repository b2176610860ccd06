"""Matrix-normal kernel: densities, modified Cholesky factors and sampling.

A subject's ``T x p`` response matrix ``Y`` is matrix normal with mean ``M``,
temporal (row) covariance ``Phi`` and response (column) covariance ``Omega``.
``Phi`` is always carried through its modified Cholesky factors
``Phi^{-1} = U' D^{-1} U`` where ``U`` is unit lower triangular with band
width ``m`` and ``D`` is a positive diagonal of innovation variances.

Vectorisation convention: ``vec(Y)`` stacks rows (time-major), i.e. entry
``(t, h)`` lands at position ``t * p + h``.  Under this convention the
covariance of ``vec(Y)`` is ``kron(Phi, Omega)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .exceptions import DegenerateError, DomainError

LOG_2PI = float(np.log(2.0 * np.pi))
PD_TOL = 1e-12


@dataclass(frozen=True)
class TemporalCholesky:
    """Banded modified Cholesky factors ``(U, D)`` of a temporal covariance.

    ``U[t, s]`` for ``s < t`` holds minus the autoregressive coefficient of
    time ``s`` in the regression of time ``t`` on its predecessors.
    """

    U: np.ndarray
    D: np.ndarray
    m: int

    def __post_init__(self):
        U = np.array(self.U, dtype=float)
        D = np.array(self.D, dtype=float).reshape(-1)
        T = D.shape[0]
        if U.shape != (T, T):
            raise DomainError(f"U has shape {U.shape}, expected {(T, T)}")
        if not 0 <= self.m <= max(T - 1, 0):
            raise DomainError(f"band order m={self.m} outside 0..{T - 1}")
        if not np.all(np.isfinite(U)) or not np.all(np.isfinite(D)):
            raise DomainError("non-finite entry in temporal Cholesky factors")
        if np.any(D <= 0):
            raise DomainError("innovation variances D must be positive")
        if not np.all(np.diag(U) == 1.0):
            raise DomainError("U must have a unit diagonal")
        if np.any(U[band_mask(T, self.m) == 0] != 0.0):
            raise DomainError(f"U has entries outside the lower band of order {self.m}")
        U.setflags(write=False)
        D.setflags(write=False)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "m", int(self.m))

    @property
    def T(self) -> int:
        return self.D.shape[0]

    @classmethod
    def identity(cls, T: int, m: int = 0) -> "TemporalCholesky":
        return cls(np.eye(T), np.ones(T), m)

    def precision(self) -> np.ndarray:
        """``Phi^{-1} = U' D^{-1} U``."""
        return self.U.T @ (self.U / self.D[:, None])

    def scaled(self, factor: float) -> "TemporalCholesky":
        """Factors of ``factor * Phi``."""
        return TemporalCholesky(self.U, self.D * factor, self.m)


def band_mask(T: int, m: int) -> np.ndarray:
    """Boolean ``T x T`` mask of the admissible entries of ``U`` (diagonal included)."""
    t, s = np.indices((T, T))
    return (s <= t) & (t - s <= m)


def pd_cholesky(A, name: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Raises :class:`DomainError` when ``A`` is asymmetric, not PD, or its
    smallest pivot is below ``PD_TOL``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise DomainError(f"{name} has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-10 * scale:
        raise DomainError(f"{name} is not symmetric")
    try:
        L = np.linalg.cholesky(0.5 * (A + A.T))
    except np.linalg.LinAlgError:
        raise DomainError(f"{name} is not positive definite") from None
    if np.min(np.diag(L) ** 2, initial=np.inf) <= PD_TOL:
        raise DomainError(f"{name} is numerically singular")
    return L


def batch_log_density(R: np.ndarray, chol: TemporalCholesky, omega_chol: np.ndarray) -> np.ndarray:
    """Log densities of residual matrices ``R`` (shape ``(n, T, p)``) at zero mean.

    ``omega_chol`` is the lower Cholesky factor of Omega.  The quadratic form
    ``tr(U'D^{-1}U R Omega^{-1} R')`` is evaluated as the squared norm of
    ``D^{-1/2} U R L^{-T}``, so Phi itself is never formed.
    """
    n, T, p = R.shape
    W = np.einsum("ts,jsh->jth", chol.U, R)
    # W L^{-T}: solve L Z' = W' for each subject at once
    Z = linalg.solve_triangular(omega_chol, W.reshape(n * T, p).T, lower=True).T
    quad = ((Z**2).reshape(n, T, p).sum(axis=2) / chol.D[None, :]).sum(axis=1)
    logdet_D = float(np.sum(np.log(chol.D)))
    logdet_omega = 2.0 * float(np.sum(np.log(np.diag(omega_chol))))
    return -0.5 * (T * p * LOG_2PI + p * logdet_D + T * logdet_omega + quad)


def log_density(Y, M, chol: TemporalCholesky, Omega) -> float:
    """Log matrix-normal density ``log phi(Y; M, Phi, Omega)``.

    Uses ``|Phi| = |D|`` (``U`` has unit determinant) and the trace form
    with ``U' D^{-1} U``.
    """
    Y = np.asarray(Y, dtype=float)
    M = np.asarray(M, dtype=float)
    if Y.shape != M.shape or Y.ndim != 2:
        raise DomainError(f"Y {Y.shape} and M {M.shape} must be conformable matrices")
    if Y.shape[0] != chol.T:
        raise DomainError(f"Y has {Y.shape[0]} rows but the temporal factor has T={chol.T}")
    L = pd_cholesky(Omega, "Omega")
    if L.shape[0] != Y.shape[1]:
        raise DomainError("Omega does not match the number of responses")
    return float(batch_log_density((Y - M)[None], chol, L)[0])


def kron_oracle(Y, M, Phi, Omega) -> float:
    """Brute-force log density through the explicit ``Tp x Tp`` covariance ``kron(Phi, Omega)``.

    Test oracle only: cubic in ``T * p``.
    """
    Y = np.asarray(Y, dtype=float)
    M = np.asarray(M, dtype=float)
    Phi = np.asarray(Phi, dtype=float)
    Omega = np.asarray(Omega, dtype=float)
    pd_cholesky(Phi, "Phi")
    pd_cholesky(Omega, "Omega")
    Sigma = np.kron(Phi, Omega)
    try:
        L = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        raise DomainError("Kronecker covariance is singular") from None
    r = (Y - M).reshape(-1)  # row-major = time-major
    z = linalg.solve_triangular(L, r, lower=True)
    d = r.size
    return float(-0.5 * (d * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + z @ z))


def compose_phi(chol: TemporalCholesky) -> np.ndarray:
    """``Phi = (U' D^{-1} U)^{-1} = U^{-1} D U^{-T}``."""
    Uinv = linalg.solve_triangular(chol.U, np.eye(chol.T), lower=True, unit_diagonal=True)
    Phi = (Uinv * chol.D[None, :]) @ Uinv.T
    return 0.5 * (Phi + Phi.T)


def banded_regression(S: np.ndarray, m: int) -> np.ndarray:
    """Unit lower triangular ``U`` whose row ``r`` regresses time ``r`` on its ``m`` predecessors.

    For each ``r`` the coefficients solve ``S[P, P] rho = S[P, r]`` with
    ``P = max(0, r - m) .. r - 1``; ``U[r, P] = -rho``.  Raises
    :class:`DegenerateError` if a predecessor block is singular.
    """
    T = S.shape[0]
    U = np.eye(T)
    for r in range(1, T):
        lo = max(0, r - m)
        if lo == r:
            continue
        block = S[lo:r, lo:r]
        try:
            c, low = linalg.cho_factor(block, lower=True, check_finite=False)
        except linalg.LinAlgError:
            raise DegenerateError(f"singular scatter block for time {r}") from None
        if np.min(np.abs(np.diag(c))) ** 2 <= PD_TOL * float(np.max(np.abs(block))):
            raise DegenerateError(f"singular scatter block for time {r}")
        U[r, lo:r] = -linalg.cho_solve((c, low), S[lo:r, r], check_finite=False)
    return U


def decompose_phi(Phi, m: int) -> TemporalCholesky:
    """Modified Cholesky factors of ``Phi``, banded to order ``m``.

    At ``m = T - 1`` this is the exact decomposition ``U Phi U' = D``.  For
    smaller ``m`` each row keeps only the ``m`` most recent predecessors (the
    banded least-squares projection) and ``D`` holds the residual variances.
    """
    Phi = np.asarray(Phi, dtype=float)
    pd_cholesky(Phi, "Phi")
    T = Phi.shape[0]
    if not 0 <= m <= T - 1:
        raise DomainError(f"band order m={m} outside 0..{T - 1}")
    U = banded_regression(Phi, m)
    D = np.einsum("ts,su,tu->t", U, Phi, U)
    return TemporalCholesky(U, D, m)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_errors(chol: TemporalCholesky, Omega, rng, size: int) -> np.ndarray:
    """Draw ``size`` error matrices from the GAR process with response covariance Omega.

    Rows of ``Z`` are iid ``N(0, Omega)`` innovations; the GAR recursion
    ``e_t = sum_s rho_{t,t-s} e_{t-s} + sqrt(d_t) z_t`` is the forward
    substitution ``U E = D^{1/2} Z``.
    """
    rng = _rng(rng)
    L = pd_cholesky(Omega, "Omega")
    T, p = chol.T, L.shape[0]
    Z = rng.standard_normal((size, T, p)) @ L.T
    Z *= np.sqrt(chol.D)[None, :, None]
    E = linalg.solve_triangular(
        chol.U, Z.transpose(1, 0, 2).reshape(T, size * p), lower=True, unit_diagonal=True
    )
    return E.reshape(T, size, p).transpose(1, 0, 2)


def sample(M, chol: TemporalCholesky, Omega, seed=None) -> np.ndarray:
    """Draw one response matrix ``M + E``; deterministic for a given seed."""
    M = np.asarray(M, dtype=float)
    return M + sample_errors(chol, Omega, _rng(seed), 1)[0]
