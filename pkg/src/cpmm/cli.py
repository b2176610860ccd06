"""Batch command line: ``cpmm {fit,grid,se,simulate,predict} --config run.json``.

Settings are resolved in three layers, later ones winning: the JSON
config file, ``CPMM_*`` environment variables, then command-line flags.

Exit status: 0 on success, 1 for usage, configuration or data errors,
2 for numerical failures (every start degenerated, non-PD information).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np

from . import artifacts
from .data import PanelDataset, ingest, write_long_csv
from .em import FitConfig, fit, rmsd
from .exceptions import (
    ConfigError,
    CPMMError,
    DataError,
    DegenerateError,
    DomainError,
    FitError,
    InferenceError,
    PatternError,
)
from .infer import DEFAULT_REL_STEP, wald_report
from .patterns import ModelSpec
from .select import GridSpec, grid_search
from .sim import default_covariate_sampler, generate_dataset, recovery_report, scenario_params

ENV_PREFIX = "CPMM_"
COMMANDS = ("fit", "grid", "se", "simulate", "predict")
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
NUMERIC_ERRORS = (FitError, DegenerateError, InferenceError)
USAGE_ERRORS = (ConfigError, DataError, PatternError, DomainError)


@dataclass
class RunConfig:
    """Validated run settings; paths are already resolved against the config file's directory."""

    data: dict | None = None
    model: dict | None = None
    grid: dict | None = None
    simulate: dict | None = None
    params: Path | None = None
    fit: FitConfig = field(default_factory=FitConfig)
    out: Path = Path("cpmm-out")
    threads: int = 1
    one_sided: bool = False
    map_predict: bool = False
    timing: bool = True
    rel_step: float = DEFAULT_REL_STEP

    @property
    def rule(self) -> str:
        return "map" if self.map_predict else "posterior"


def _parse_bool(text: str, name: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"{name}={text!r} is not a boolean")


def _parse_int(text, name: str, minimum: int) -> int:
    try:
        value = int(text)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}={text!r} is not an integer") from None
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")
    return value


def read_config(path) -> dict:
    path = Path(path)
    try:
        doc = artifacts.read_json(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    try:
        artifacts.validate(doc, "config")
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"{path}: {where}: {exc.message}") from None
    return doc


def build_config(doc: dict, base: Path, args: argparse.Namespace | None = None, env=None) -> RunConfig:
    env = os.environ if env is None else env

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    cfg = RunConfig()
    if "data" in doc:
        cfg.data = dict(doc["data"], path=resolve(doc["data"]["path"]))
    cfg.model = doc.get("model")
    cfg.grid = doc.get("grid")
    cfg.simulate = doc.get("simulate")
    if "params" in doc:
        cfg.params = resolve(doc["params"])
    cfg.fit = FitConfig(**doc.get("fit", {}))
    if "output" in doc:
        cfg.out = resolve(doc["output"])
    cfg.threads = doc.get("threads", 1)
    cfg.one_sided = doc.get("one_sided", False)
    cfg.map_predict = doc.get("map_predict", False)
    cfg.rel_step = doc.get("rel_step", DEFAULT_REL_STEP)

    seed = None
    if f"{ENV_PREFIX}OUT" in env:
        cfg.out = Path(env[f"{ENV_PREFIX}OUT"])
    if f"{ENV_PREFIX}SEED" in env:
        seed = _parse_int(env[f"{ENV_PREFIX}SEED"], f"{ENV_PREFIX}SEED", 0)
    if f"{ENV_PREFIX}THREADS" in env:
        cfg.threads = _parse_int(env[f"{ENV_PREFIX}THREADS"], f"{ENV_PREFIX}THREADS", 1)
    for key, attr in (("ONE_SIDED", "one_sided"), ("MAP_PREDICT", "map_predict")):
        if ENV_PREFIX + key in env:
            setattr(cfg, attr, _parse_bool(env[ENV_PREFIX + key], ENV_PREFIX + key))
    if f"{ENV_PREFIX}NO_TIMING" in env:
        cfg.timing = not _parse_bool(env[f"{ENV_PREFIX}NO_TIMING"], f"{ENV_PREFIX}NO_TIMING")

    if args is not None:
        if args.out is not None:
            cfg.out = Path(args.out)
        if args.seed is not None:
            seed = args.seed
        if args.threads is not None:
            cfg.threads = args.threads
        cfg.one_sided = cfg.one_sided or args.one_sided
        cfg.map_predict = cfg.map_predict or args.map_predict
        cfg.timing = cfg.timing and not args.no_timing

    if seed is not None:
        cfg.fit = replace(cfg.fit, seed=seed)
        if cfg.simulate is not None:
            cfg.simulate = dict(cfg.simulate, seed=seed)
    cfg.fit = replace(cfg.fit, threads=cfg.threads, prediction=cfg.rule)
    return cfg


# ---------------------------------------------------------------------------
# commands


def _require(cfg: RunConfig, command: str, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise ConfigError(f"'{command}' needs config section(s): {', '.join(missing)}")


def load_data(cfg: RunConfig) -> PanelDataset:
    d = cfg.data
    return ingest(
        d["path"],
        d["responses"],
        d.get("covariates", ()),
        subject=d.get("subject", "subject"),
        time=d.get("time", "time"),
        time_order=d.get("time_order"),
    )


def model_spec(model: dict, data: PanelDataset) -> ModelSpec:
    cov = bool(model.get("covariates", True)) and data.q > 0
    return ModelSpec(
        k=model["k"],
        omega=model.get("omega", "VVV"),
        phi=model.get("phi", "GAR"),
        m=model.get("m", min(1, data.T - 1)),
        T=data.T,
        p=data.p,
        q=data.q if cov else 0,
        with_covariates=cov,
    )


def _fit_model(cfg: RunConfig, data: PanelDataset):
    spec = model_spec(cfg.model, data)
    cell = data if spec.with_covariates else data.without_covariates()
    return fit(cell, spec, cfg.fit)


def _params_for(cfg: RunConfig, data: PanelDataset, command: str):
    if cfg.params is not None:
        return artifacts.load_params(cfg.params, data)
    if cfg.model is not None:
        return _fit_model(cfg, data).params
    raise ConfigError(f"'{command}' needs either 'params' (a params.json path) or a 'model' section")


def cmd_fit(cfg: RunConfig) -> list[Path]:
    _require(cfg, "fit", "data", "model")
    data = load_data(cfg)
    return artifacts.write_fit_artifacts(data, _fit_model(cfg, data), cfg.out)


def _grid_spec(cfg: RunConfig, T: int) -> GridSpec:
    g = cfg.grid
    return GridSpec(
        ks=tuple(g["k"]),
        ms=tuple(g.get("m", range(min(2, T)))),
        omegas=tuple(g.get("omega", ("VVV",))),
        phis=tuple(g.get("phi", ("GAR",))),
        covariates=tuple(g.get("covariates", (True,))),
        config=cfg.fit,
        threads=cfg.threads,
        warm_start=g.get("warm_start", False),
    )


def cmd_grid(cfg: RunConfig) -> list[Path]:
    _require(cfg, "grid", "data", "grid")
    data = load_data(cfg)
    table = grid_search(data, _grid_spec(cfg, data.T))
    cfg.out.mkdir(parents=True, exist_ok=True)
    artifacts.write_grid_table(table, cfg.out / "grid_table.csv", cfg.timing)
    artifacts.write_table5(table, cfg.out / "table5.csv", cfg.timing)
    written = artifacts.write_fit_artifacts(data, table.best.fit, cfg.out)
    return [cfg.out / "grid_table.csv", cfg.out / "table5.csv", *written]


def cmd_se(cfg: RunConfig) -> list[Path]:
    _require(cfg, "se", "data")
    data = load_data(cfg)
    params = _params_for(cfg, data, "se")
    report = wald_report(artifacts.matching_data(data, params), params, cfg.rel_step)
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / "coef_table.csv"
    artifacts.write_wald_table(report, path, cfg.one_sided)
    return [path]


def cmd_predict(cfg: RunConfig) -> list[Path]:
    _require(cfg, "predict", "data")
    data = load_data(cfg)
    params = _params_for(cfg, data, "predict")
    data = artifacts.matching_data(data, params)
    cfg.out.mkdir(parents=True, exist_ok=True)
    Yhat = artifacts.write_predictions(data, params, cfg.rule, cfg.out / "predictions.csv")
    doc = artifacts.rmsd_document(rmsd(Yhat, data.Y), cfg.rule, data)
    artifacts.write_json(doc, cfg.out / "rmsd.json", "rmsd")
    return [cfg.out / "predictions.csv", cfg.out / "rmsd.json"]


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    """Draw a dataset from a scenario, fit it (``model``/``grid`` section or the true spec), score recovery."""
    _require(cfg, "simulate", "simulate")
    s = dict(cfg.simulate)
    n, seed = s.pop("n"), s.pop("seed", 0)
    binary = s.pop("binary_covariates", 0)
    scenario_seed = s.pop("scenario_seed", 0)
    truth_params = scenario_params(seed=scenario_seed, **s)
    data, truth = generate_dataset(truth_params, default_covariate_sampler(binary), n=n, seed=seed)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_long_csv(data, cfg.out / "data.csv")
    artifacts.write_json(
        artifacts.truth_document(truth_params, truth.labels, seed), cfg.out / "truth.json", "truth"
    )
    written = [cfg.out / "data.csv", cfg.out / "truth.json"]
    if cfg.grid is not None:
        table = grid_search(data, _grid_spec(cfg, data.T))
        artifacts.write_grid_table(table, cfg.out / "grid_table.csv", cfg.timing)
        written.append(cfg.out / "grid_table.csv")
        result = table.best.fit
    else:
        spec = model_spec(cfg.model, data) if cfg.model is not None else truth_params.spec
        result = fit(data if spec.with_covariates else data.without_covariates(), spec, cfg.fit)
    written += artifacts.write_fit_artifacts(data, result, cfg.out)
    report = recovery_report(truth, result)
    artifacts.write_json(artifacts.recovery_document(report), cfg.out / "recovery.json", "recovery")
    written.append(cfg.out / "recovery.json")
    return written


HANDLERS = {"fit": cmd_fit, "grid": cmd_grid, "se": cmd_se, "simulate": cmd_simulate, "predict": cmd_predict}


def run(command: str, cfg: RunConfig) -> list[Path]:
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    return HANDLERS[command](cfg)


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpmm", description="Covariance pattern mixture models for multivariate panels.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--seed", type=int, help="base seed for starts and simulation")
    parser.add_argument("--threads", type=int, help="worker threads for multistart and grid cells")
    parser.add_argument("--one-sided", action="store_true", help="report one-sided Wald p-values")
    parser.add_argument("--map-predict", action="store_true", help="predict with the MAP component")
    parser.add_argument("--no-timing", action="store_true", help="leave wall-time columns empty")
    return parser


def _origin(exc: BaseException) -> str:
    """Name of the innermost package module the exception passed through."""
    name, tb = "cpmm", exc.__traceback__
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("cpmm."):
            name = mod
        tb = tb.tb_next
    return name


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg_path = Path(args.config)
        cfg = build_config(read_config(cfg_path), cfg_path.resolve().parent, args)
        t0 = time.perf_counter()
        written = run(args.command, cfg)
    except NUMERIC_ERRORS as exc:
        print(f"cpmm: numerical failure [{_origin(exc)}]: {exc}", file=sys.stderr)
        for line in getattr(exc, "diagnostics", [])[:10]:
            print(f"  {line}", file=sys.stderr)
        return EXIT_NUMERIC
    except USAGE_ERRORS as exc:
        print(f"cpmm: error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CPMMError as exc:
        print(f"cpmm: error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cpmm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    elapsed = time.perf_counter() - t0
    for path in written:
        print(path)
    if cfg.timing:
        print(f"done in {elapsed:.1f} s", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
