"""Model selection over a grid of (k, m, Omega pattern, Phi pattern, covariates)."""

from __future__ import annotations

import itertools
import math
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import PanelDataset
from .em import FitConfig, FitResult, fit
from .exceptions import CPMMError, FitError
from .patterns import ModelSpec, param_count

BIC_CONVENTION = "BIC = -2 loglik + nu ln(n), n = number of subjects; lower is better"
AIC_CONVENTION = "AIC = -2 loglik + 2 nu; lower is better"
NU_CONVENTION = (
    "nu = (k-1) + k(T+q)p + temporal + response parameters - one trace constraint per distinct free Omega"
)


def bic(loglik: float, nu: int, n: int) -> float:
    if n < 1 or nu < 0:
        raise ValueError("bic needs n >= 1 and nu >= 0")
    return -2.0 * loglik + nu * math.log(n)


def aic(loglik: float, nu: int) -> float:
    if nu < 0:
        raise ValueError("aic needs nu >= 0")
    return -2.0 * loglik + 2.0 * nu


@dataclass
class GridSpec:
    ks: tuple = (1, 2, 3)
    ms: tuple = (0, 1)
    omegas: tuple = ("VVV",)
    phis: tuple = ("GAR",)
    covariates: tuple = (True,)
    config: FitConfig = field(default_factory=FitConfig)
    threads: int = 1
    warm_start: bool = False

    def cells(self, T: int, p: int, q: int) -> list[ModelSpec]:
        if not all([self.ks, self.ms, self.omegas, self.phis, self.covariates]):
            raise ValueError("every grid axis needs at least one value")
        out = []
        for k, m, om, ph, cov in itertools.product(self.ks, self.ms, self.omegas, self.phis, self.covariates):
            out.append(ModelSpec(int(k), om, ph, int(m), T, p, q if cov else 0, bool(cov and q > 0)))
        return out


@dataclass
class GridRow:
    spec: ModelSpec
    loglik: float
    nu: int
    bic: float
    aic: float
    rmsd: float
    converged: bool
    wall_time: float
    failed: bool = False
    error: str = ""
    fit: FitResult | None = field(default=None, repr=False)

    def sort_key(self):
        s = self.spec
        return (
            self.failed,
            self.bic if not self.failed else math.inf,
            self.nu,
            (s.k, s.phi, s.m, s.omega, s.with_covariates),
        )


@dataclass
class GridTable:
    rows: list
    n: int
    metadata: dict = field(default_factory=dict)

    @property
    def best(self) -> GridRow:
        return self.rows[0]

    def best_by(self, predicate) -> GridRow | None:
        for row in self.rows:
            if not row.failed and predicate(row.spec):
                return row
        return None


def cell_seed(base_seed: int, spec: ModelSpec) -> int:
    """Seed derived from the cell coordinates, independent of evaluation order."""
    key = f"{spec.k}|{spec.phi}|{spec.m}|{spec.omega}|{int(spec.with_covariates)}".encode()
    return int(np.random.SeedSequence([int(base_seed), zlib.crc32(key)]).generate_state(1)[0])


def _split_init(prev: FitResult, seed: int) -> np.ndarray:
    """Responsibilities for ``k + 1`` components: split the heaviest component of ``prev`` at random."""
    tau = prev.posteriors.tau
    big = int(np.argmax(tau.sum(axis=0)))
    u = np.random.default_rng(seed).uniform(size=tau.shape[0])
    out = np.concatenate([tau, (tau[:, big] * (1 - u))[:, None]], axis=1)
    out[:, big] *= u
    return out


def _run_cell(data: PanelDataset, spec: ModelSpec, grid: GridSpec, init=None) -> GridRow:
    cell_data = data if spec.with_covariates else data.without_covariates()
    cfg = replace(grid.config, seed=cell_seed(grid.config.seed, spec), threads=1)
    nu = param_count(spec)
    t0 = time.perf_counter()
    try:
        res = fit(cell_data, spec, cfg, init=init)
    except CPMMError as exc:
        msg = str(exc)
        if isinstance(exc, FitError) and exc.diagnostics:
            msg += " [" + "; ".join(exc.diagnostics[:3]) + "]"
        return GridRow(spec, math.nan, nu, math.nan, math.nan, math.nan, False, time.perf_counter() - t0, True, msg)
    ll = res.loglik
    return GridRow(
        spec,
        ll,
        nu,
        bic(ll, nu, data.n),
        aic(ll, nu),
        res.rmsd,
        res.converged,
        time.perf_counter() - t0,
        fit=res,
    )


def grid_search(data: PanelDataset, grid: GridSpec) -> GridTable:
    """Fit every cell independently and rank by BIC (ties: fewer parameters, then coordinates)."""
    cells = grid.cells(data.T, data.p, data.q)
    if grid.warm_start:
        # chains along k; each chain is sequential, chains run in parallel
        chains: dict[tuple, list[ModelSpec]] = {}
        for s in cells:
            chains.setdefault((s.phi, s.m, s.omega, s.with_covariates), []).append(s)

        def run_chain(chain):
            rows, prev = [], None
            for s in sorted(chain, key=lambda s: s.k):
                init = None
                if prev is not None and prev.fit is not None and prev.spec.k == s.k - 1:
                    init = _split_init(prev.fit, cell_seed(grid.config.seed, s))
                prev = _run_cell(data, s, grid, init)
                rows.append(prev)
            return rows

        tasks = list(chains.values())
        runner = run_chain
    else:
        tasks = cells

        def runner(s):
            return [_run_cell(data, s, grid)]

    if grid.threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=grid.threads) as pool:
            rows = [r for rs in pool.map(runner, tasks) for r in rs]
    else:
        rows = [r for t in tasks for r in runner(t)]
    if all(r.failed for r in rows):
        raise FitError("every grid cell failed", [f"{r.spec.label}: {r.error}" for r in rows])
    rows.sort(key=GridRow.sort_key)
    meta = {"bic": BIC_CONVENTION, "aic": AIC_CONVENTION, "nu": NU_CONVENTION, "n": data.n}
    return GridTable(rows, data.n, meta)
