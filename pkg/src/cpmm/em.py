"""EM fitting of covariance pattern mixtures of matrix-normal regressions.

One EM sweep updates, in order, the weights, the regression matrices (GLS
given the current temporal factors), the temporal scatters, the temporal
factors ``(U, D)`` and finally the response covariances ``Omega`` under the
chosen patterns.  Each update maximises the expected complete-data
log-likelihood given the others, so the observed log-likelihood never
decreases.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .data import PanelDataset
from .exceptions import DegenerateError, DomainError, FitError
from .matnorm import TemporalCholesky, batch_log_density, pd_cholesky
from .patterns import OMEGA_SHARED, ModelSpec, phi_shared, project_omega, project_temporal

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MixtureParams:
    """Weights, regression matrices and covariance factors of a fitted mixture.

    ``theta`` has shape ``(k, T + q, p)``: the first ``T`` rows of each
    component are time-specific intercepts, the last ``q`` rows covariate
    effects.  ``omegas`` has shape ``(k, p, p)``.
    """

    spec: ModelSpec
    weights: np.ndarray
    theta: np.ndarray
    chols: tuple
    omegas: np.ndarray

    def __post_init__(self):
        k, T, p, q = self.spec.k, self.spec.T, self.spec.p, self.spec.q
        w = np.array(self.weights, dtype=float).reshape(-1)
        th = np.array(self.theta, dtype=float)
        om = np.array(self.omegas, dtype=float)
        if w.shape != (k,) or th.shape != (k, T + q, p) or om.shape != (k, p, p) or len(self.chols) != k:
            raise DomainError("parameter shapes do not match the model specification")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("mixture weights must be nonnegative and sum to 1")
        for a in (w, th, om):
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "omegas", om)
        object.__setattr__(self, "chols", tuple(self.chols))

    @property
    def k(self) -> int:
        return self.spec.k

    @classmethod
    def initial(cls, spec: ModelSpec) -> "MixtureParams":
        """Placeholder point: zero regression, identity covariances, equal weights."""
        chol = TemporalCholesky.identity(spec.T, spec.m)
        return cls(
            spec,
            np.full(spec.k, 1.0 / spec.k),
            np.zeros((spec.k, spec.T + spec.q, spec.p)),
            (chol,) * spec.k,
            np.broadcast_to(np.eye(spec.p), (spec.k, spec.p, spec.p)),
        )

    def permuted(self, perm) -> "MixtureParams":
        perm = list(perm)
        return replace(
            self,
            weights=self.weights[perm],
            theta=self.theta[perm],
            chols=tuple(self.chols[i] for i in perm),
            omegas=self.omegas[perm],
        )

    def scaled_responses(self, c: float) -> "MixtureParams":
        """Parameters describing ``c * Y``: regression times ``c``, ``Phi`` times ``c**2``."""
        shared = {}
        chols = []
        for ch in self.chols:
            if id(ch) not in shared:
                shared[id(ch)] = ch.scaled(c * c)
            chols.append(shared[id(ch)])
        return replace(self, theta=self.theta * c, chols=tuple(chols))

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "weights": self.weights.tolist(),
            "components": [
                {
                    "theta": self.theta[i].tolist(),
                    "U": self.chols[i].U.tolist(),
                    "D": self.chols[i].D.tolist(),
                    "omega": self.omegas[i].tolist(),
                }
                for i in range(self.k)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureParams":
        spec = ModelSpec.from_dict(d["spec"])
        comps = d["components"]
        chols = [TemporalCholesky(np.array(c["U"]), np.array(c["D"]), spec.m) for c in comps]
        if phi_shared(spec.phi):
            chols = [chols[0]] * spec.k
        return cls(
            spec,
            np.array(d["weights"]),
            np.array([c["theta"] for c in comps]),
            tuple(chols),
            np.array([c["omega"] for c in comps]),
        )


@dataclass(frozen=True)
class Posteriors:
    """Responsibilities ``tau`` (``n x k``), rows summing to one."""

    tau: np.ndarray

    @property
    def masses(self) -> np.ndarray:
        return self.tau.sum(axis=0)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.tau, axis=1)


@dataclass
class FitConfig:
    n_starts: int = 10
    burn_in: int = 20
    tol: float = 1e-8
    max_iter: int = 500
    seed: int = 0
    threads: int = 1
    prediction: str = "posterior"  # or "map"
    min_mass: float | None = None  # default p + 1


@dataclass
class FitResult:
    params: MixtureParams
    posteriors: Posteriors
    loglik_trace: list
    converged: bool
    n_iter: int
    best_start_index: int
    map_labels: np.ndarray
    rmsd: float
    prediction: str = "posterior"
    start_logliks: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    @property
    def spec(self) -> ModelSpec:
        return self.params.spec


# ---------------------------------------------------------------------------
# E-step and likelihood


def _omega_chols(params: MixtureParams) -> list[np.ndarray]:
    try:
        return [pd_cholesky(O, "Omega") for O in params.omegas]
    except DomainError as exc:
        raise DegenerateError(str(exc)) from None


def component_log_densities(data: PanelDataset, params: MixtureParams) -> np.ndarray:
    """``(n, k)`` array of ``log pi_i + log phi(Y_j; M_ij, Phi_i, Omega_i)``."""
    Xd = data.design
    out = np.empty((data.n, params.k))
    for i, L in enumerate(_omega_chols(params)):
        R = data.Y - Xd @ params.theta[i]
        out[:, i] = batch_log_density(R, params.chols[i], L)
    with np.errstate(divide="ignore"):
        out += np.log(params.weights)[None, :]
    return out


def _posteriors(logd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if np.any(np.isnan(logd)) or np.any(logd == np.inf):
        raise DegenerateError("non-finite component density")
    row = logsumexp(logd, axis=1)
    if not np.all(np.isfinite(row)):
        raise DegenerateError("non-finite log-likelihood")
    tau = np.exp(logd - row[:, None])
    tau /= tau.sum(axis=1, keepdims=True)
    return tau, row


def e_step(data: PanelDataset, params: MixtureParams) -> Posteriors:
    """Posterior membership probabilities, computed in log space."""
    tau, _ = _posteriors(component_log_densities(data, params))
    return Posteriors(tau)


def log_likelihood(data: PanelDataset, params: MixtureParams) -> float:
    """Observed-data log-likelihood ``sum_j log sum_i pi_i phi(Y_j; ...)``."""
    logd = component_log_densities(data, params)
    row = logsumexp(logd, axis=1)
    return math.fsum(row.tolist())


# ---------------------------------------------------------------------------
# M-step pieces


def _tau(post) -> np.ndarray:
    return post.tau if isinstance(post, Posteriors) else np.asarray(post, dtype=float)


def _check_masses(masses: np.ndarray, floor: float) -> None:
    if np.any(masses <= floor):
        raise DegenerateError(f"component mass {float(np.min(masses)):.3g} below floor {floor:g}")


def m_step_weights(post) -> np.ndarray:
    tau = _tau(post)
    w = tau.sum(axis=0) / tau.shape[0]
    return w / w.sum()


def _whiten(A: np.ndarray, chol: TemporalCholesky) -> np.ndarray:
    """``D^{-1/2} U A_j`` for every subject slice of ``A`` (shape ``(n, T, c)``)."""
    return np.einsum("ts,jsc->jtc", chol.U, A) / np.sqrt(chol.D)[None, :, None]


def m_step_regression(data: PanelDataset, post, chols) -> np.ndarray:
    """Weighted GLS: ``[sum tau X'Phi^-1 X]^-1 sum tau X'Phi^-1 Y`` per component."""
    tau = _tau(post)
    Xd = data.design
    k = tau.shape[1]
    theta = np.empty((k, Xd.shape[2], data.p))
    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for i in range(k):
        ch = chols[i]
        if id(ch) not in cache:
            cache[id(ch)] = (_whiten(Xd, ch), _whiten(data.Y, ch))
        XW, YW = cache[id(ch)]
        A = np.einsum("j,jtc,jtd->cd", tau[:, i], XW, XW)
        b = np.einsum("j,jtc,jth->ch", tau[:, i], XW, YW)
        try:
            cf = linalg.cho_factor(A, lower=True)
        except linalg.LinAlgError:
            raise DegenerateError(f"singular regression normal matrix in component {i}") from None
        if np.min(np.diag(cf[0])) ** 2 <= 1e-12 * np.max(np.abs(np.diag(A))):
            raise DegenerateError(f"singular regression normal matrix in component {i}")
        theta[i] = linalg.cho_solve(cf, b)
    return theta


def m_step_scatter(data: PanelDataset, post, theta, omegas, min_mass: float = 0.0) -> np.ndarray:
    """Temporal scatters ``S_i = (1/n_i) sum_j tau_ij R_ij Omega_i^{-1} R_ij'``, shape ``(k, T, T)``."""
    tau = _tau(post)
    masses = tau.sum(axis=0)
    _check_masses(masses, min_mass)
    Xd = data.design
    k, n, T, p = tau.shape[1], data.n, data.T, data.p
    S = np.empty((k, T, T))
    for i in range(k):
        try:
            L = pd_cholesky(omegas[i], "Omega")
        except DomainError as exc:
            raise DegenerateError(str(exc)) from None
        R = data.Y - Xd @ theta[i]
        Z = linalg.solve_triangular(L, R.reshape(n * T, p).T, lower=True).T.reshape(n, T, p)
        Si = np.einsum("j,jth,jsh->ts", tau[:, i], Z, Z) / masses[i]
        S[i] = 0.5 * (Si + Si.T)
    return S


def m_step_temporal(S, masses, spec: ModelSpec) -> tuple:
    return tuple(project_temporal(list(S), masses, spec.phi, spec.m, spec.p))


def response_scatters(data: PanelDataset, post, theta, chols) -> np.ndarray:
    """Unconstrained (VVV) estimates ``sum_j tau_ij R' Phi_i^{-1} R / (T n_i)``."""
    tau = _tau(post)
    masses = tau.sum(axis=0)
    Xd = data.design
    k = tau.shape[1]
    W = np.empty((k, data.p, data.p))
    for i in range(k):
        V = _whiten(data.Y - Xd @ theta[i], chols[i])
        Wi = np.einsum("j,jth,jtg->hg", tau[:, i], V, V) / (data.T * masses[i])
        W[i] = 0.5 * (Wi + Wi.T)
    return W


def _omega_objective(O: np.ndarray, W: np.ndarray) -> float:
    sign, logdet = np.linalg.slogdet(O)
    if sign <= 0:
        return -np.inf
    return -(logdet + np.trace(np.linalg.solve(O, W)))


def m_step_omega(data: PanelDataset, post, theta, chols, spec: ModelSpec, current=None):
    """Pattern-constrained, trace-``p`` response covariances.

    Returns ``(omegas, chols)``: the temporal factors come back rescaled
    wherever the trace normalisation was compensated on ``D``.
    """
    tau = _tau(post)
    masses = tau.sum(axis=0)
    W = response_scatters(data, tau, theta, chols)
    constrained = phi_shared(spec.phi) and spec.k > 1 and spec.omega not in OMEGA_SHARED
    omegas, scales = project_omega(list(W), masses, spec.omega, shared_temporal=constrained)
    omegas = np.array(omegas)
    if current is not None and constrained:
        # guard: a trace-constrained update must not lower the expected log-likelihood
        for i in range(spec.k):
            if _omega_objective(current[i], W[i]) > _omega_objective(omegas[i], W[i]):
                omegas[i] = current[i]
    new_chols = []
    rescaled: dict[tuple[int, float], TemporalCholesky] = {}
    for i, ch in enumerate(chols):
        key = (id(ch), float(scales[i]))
        if key not in rescaled:
            rescaled[key] = ch if scales[i] == 1.0 else ch.scaled(1.0 / scales[i])
        new_chols.append(rescaled[key])
    return omegas, tuple(new_chols)


def m_step(data: PanelDataset, post, params: MixtureParams, min_mass: float | None = None) -> MixtureParams:
    """One full sweep: weights, regression, scatter, temporal factors, Omega."""
    spec = params.spec
    tau = _tau(post)
    masses = tau.sum(axis=0)
    floor = spec.p + 1 if min_mass is None else min_mass
    _check_masses(masses, floor)
    weights = m_step_weights(tau)
    theta = m_step_regression(data, tau, params.chols)
    S = m_step_scatter(data, tau, theta, params.omegas)
    chols = m_step_temporal(S, masses, spec)
    omegas, chols = m_step_omega(data, tau, theta, chols, spec, current=params.omegas)
    return MixtureParams(spec, weights, theta, chols, omegas)


# ---------------------------------------------------------------------------
# Prediction


def predict(data: PanelDataset, params: MixtureParams, rule: str = "posterior", post=None) -> np.ndarray:
    """Fitted ``T x p`` matrices: posterior-weighted (or MAP) systematic parts."""
    if rule not in ("posterior", "map"):
        raise ValueError(f"unknown prediction rule {rule!r}")
    tau = e_step(data, params).tau if post is None else _tau(post)
    means = [data.design @ params.theta[i] for i in range(params.k)]
    if rule == "map":
        best = np.argmax(tau, axis=1)
        return np.stack([means[best[j]][j] for j in range(data.n)])
    out = tau[:, 0, None, None] * means[0]
    for i in range(1, params.k):
        out += tau[:, i, None, None] * means[i]
    return out


def rmsd(Yhat, Y) -> float:
    """Root-mean-square deviation over every subject, occasion and response."""
    Yhat = np.asarray(Yhat, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Yhat.shape != Y.shape:
        raise DomainError(f"prediction shape {Yhat.shape} does not match observations {Y.shape}")
    return float(np.sqrt(np.mean((Yhat - Y) ** 2)))


# ---------------------------------------------------------------------------
# Driver


@dataclass
class _Run:
    index: int
    params: MixtureParams | None = None
    tau: np.ndarray | None = None
    trace: list = field(default_factory=list)
    converged: bool = False
    error: str | None = None


def _iterate(data: PanelDataset, run: _Run, n_iter: int, tol: float, min_mass) -> _Run:
    """Advance a run by up to ``n_iter`` EM sweeps; stops early on convergence."""
    params = run.params
    for _ in range(n_iter + 1):
        tau, row = _posteriors(component_log_densities(data, params))
        ll = math.fsum(row.tolist())
        run.trace.append(ll)
        run.params, run.tau = params, tau
        if len(run.trace) > 1 and abs(ll - run.trace[-2]) < tol * abs(run.trace[-2]):
            run.converged = True
            return run
        if _ == n_iter:
            break
        params = m_step(data, tau, params, min_mass)
    return run


def _start_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _initial_params(data: PanelDataset, spec: ModelSpec, rng: np.random.Generator, min_mass) -> MixtureParams:
    tau = rng.dirichlet(np.ones(spec.k), size=data.n)
    return m_step(data, tau, MixtureParams.initial(spec), min_mass)


def _burn(data, spec, config, index, init, min_mass) -> _Run:
    run = _Run(index)
    try:
        if init is None:
            run.params = _initial_params(data, spec, _start_seed(config.seed, index), min_mass)
        elif isinstance(init, MixtureParams):
            run.params = init
        else:
            run.params = m_step(data, np.asarray(init, dtype=float), MixtureParams.initial(spec), min_mass)
        _iterate(data, run, config.burn_in, config.tol, min_mass)
    except (DegenerateError, DomainError, FloatingPointError) as exc:
        run.error = f"start {index}: {exc}"
        run.params = None
    return run


def check_data_spec(data: PanelDataset, spec: ModelSpec) -> None:
    if (data.T, data.p, data.q) != (spec.T, spec.p, spec.q):
        raise DomainError(
            f"dataset dims (T={data.T}, p={data.p}, q={data.q}) do not match spec "
            f"(T={spec.T}, p={spec.p}, q={spec.q})"
        )
    if data.n < spec.k:
        raise DomainError(f"n={data.n} subjects cannot support k={spec.k} components")


def fit(data: PanelDataset, spec: ModelSpec, config: FitConfig | None = None, init=None) -> FitResult:
    """Multistart EM.

    Every start (explicit ``init`` entries first, then ``config.n_starts``
    random Dirichlet soft assignments) runs ``burn_in`` sweeps; starts are
    then continued to convergence in order of their log-likelihood (ties to
    the lower index) until one finishes without degenerating.
    ``init`` may be a :class:`MixtureParams`, an ``n x k`` responsibility
    matrix, or a list of either.
    """
    config = config or FitConfig()
    check_data_spec(data, spec)
    inits = [] if init is None else (list(init) if isinstance(init, (list, tuple)) else [init])
    starts = inits + [None] * config.n_starts
    if not starts:
        raise FitError("no starts requested")
    min_mass = config.min_mass

    def burn(idx):
        return _burn(data, spec, config, idx, starts[idx], min_mass)

    if config.threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            runs = list(pool.map(burn, range(len(starts))))
    else:
        runs = [burn(i) for i in range(len(starts))]

    failures = [r.error for r in runs if r.error]
    alive = sorted((r for r in runs if r.error is None), key=lambda r: (-r.trace[-1], r.index))
    start_lls = [r.trace[-1] if r.error is None else None for r in runs]
    for run in alive:
        try:
            if not run.converged:
                _iterate(data, run, max(config.max_iter - (len(run.trace) - 1), 0), config.tol, min_mass)
        except (DegenerateError, DomainError, FloatingPointError) as exc:
            failures.append(f"start {run.index} (continuation): {exc}")
            continue
        post = Posteriors(run.tau)
        yhat = predict(data, run.params, config.prediction, post)
        logger.debug("fit %s: start %d, loglik %.6f", spec.label, run.index, run.trace[-1])
        return FitResult(
            params=run.params,
            posteriors=post,
            loglik_trace=run.trace,
            converged=run.converged,
            n_iter=len(run.trace) - 1,
            best_start_index=run.index,
            map_labels=post.labels,
            rmsd=rmsd(yhat, data.Y),
            prediction=config.prediction,
            start_logliks=start_lls,
            failures=failures,
        )
    raise FitError(f"all {len(starts)} starts failed for {spec.label}", failures)
