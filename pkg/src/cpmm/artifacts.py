"""Serialization of fits, grids, Wald reports and simulation outputs.

CSV floats use 17 significant digits.  JSON documents carry a
``schema_version`` field and are validated against the schemas shipped in
``cpmm/schemas`` before they are written.
"""

from __future__ import annotations

import csv
import json
import math
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .data import PanelDataset, fmt
from .em import FitResult, MixtureParams, predict
from .exceptions import ConfigError
from .infer import WaldReport
from .select import AIC_CONVENTION, BIC_CONVENTION, NU_CONVENTION, GridTable, aic, bic
from .patterns import param_count

SCHEMA_VERSION = 1
TRACE_CONVENTION = "trace(Omega_i) = p for every component"
FIT_ARTIFACTS = ("params.json", "posteriors.csv", "labels.csv", "coef_table.csv", "profiles.csv")
TABLE5_COLUMNS = ("model", "time", "logLik", "BIC", "k*", "Phi", "Omega", "RMSD")


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("cpmm").joinpath("schemas", f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate(doc, name: str) -> None:
    jsonschema.validate(doc, load_schema(name))


def write_json(doc: dict, path, schema: str | None = None) -> None:
    if schema is not None:
        validate(doc, schema)
    text = json.dumps(doc, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path) -> dict:
    with Path(path).open(encoding="utf-8") as fh:
        return json.load(fh)


def _num(x) -> str:
    """CSV cell for a float; NaN becomes an empty cell."""
    x = float(x)
    return "" if np.isnan(x) else fmt(x)


def _write_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# parameters


def params_document(data: PanelDataset, result: FitResult) -> dict:
    spec = result.spec
    nu = param_count(spec)
    ll = result.loglik
    doc = {"schema_version": SCHEMA_VERSION, "kind": "cpmm-params"}
    doc.update(result.params.to_dict())
    doc["names"] = {
        "time_labels": list(data.time_labels),
        "responses": list(data.response_names),
        "covariates": list(data.covariate_names) if spec.with_covariates else [],
    }
    doc["fit"] = {
        "n": data.n,
        "loglik": ll,
        "nu": nu,
        "bic": bic(ll, nu, data.n),
        "aic": aic(ll, nu),
        "rmsd": result.rmsd,
        "converged": bool(result.converged),
        "n_iter": result.n_iter,
        "best_start_index": result.best_start_index,
        "prediction_rule": result.prediction,
    }
    doc["conventions"] = {
        "bic": BIC_CONVENTION,
        "aic": AIC_CONVENTION,
        "nu": NU_CONVENTION,
        "trace": TRACE_CONVENTION,
        "indexing": "components and groups are numbered from 1",
    }
    return doc


def load_params(path, data: PanelDataset | None = None) -> MixtureParams:
    """Read a ``params.json`` and check it against ``data`` (names and dimensions)."""
    doc = read_json(path)
    try:
        validate(doc, "params")
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{path}: not a valid parameter file: {exc.message}") from None
    params = MixtureParams.from_dict(doc)
    if data is not None:
        names = doc["names"]
        if list(data.time_labels) != names["time_labels"] or list(data.response_names) != names["responses"]:
            raise ConfigError(f"{path}: time labels or responses differ from the dataset")
        if params.spec.with_covariates and list(data.covariate_names) != names["covariates"]:
            raise ConfigError(f"{path}: covariates differ from the dataset")
    return params


def matching_data(data: PanelDataset, params: MixtureParams) -> PanelDataset:
    return data if params.spec.with_covariates else data.without_covariates()


# ---------------------------------------------------------------------------
# fit artifacts


def coefficient_rows(data: PanelDataset, params: MixtureParams):
    terms = [(f"intercept[{t}]", "intercept") for t in data.time_labels]
    terms += [(c, "covariate") for c in data.covariate_names]
    for i in range(params.k):
        for r, (term, kind) in enumerate(terms):
            for h, resp in enumerate(data.response_names):
                yield i + 1, term, kind, resp, params.theta[i, r, h]


def write_coef_table(data: PanelDataset, params: MixtureParams, path) -> None:
    rows = [[i, term, kind, resp, _num(v)] for i, term, kind, resp, v in coefficient_rows(data, params)]
    _write_csv(path, ["component", "term", "kind", "response", "estimate"], rows)


def write_wald_table(report: WaldReport, path, one_sided: bool = False) -> None:
    conv = "one-sided" if one_sided else "two-sided"
    rows = [
        [
            r.component + 1,
            r.term,
            r.kind,
            r.response,
            _num(r.estimate),
            _num(r.se),
            _num(r.z),
            _num(r.p_one_sided if one_sided else r.p_two_sided),
            conv,
            _num(r.p_one_sided),
            _num(r.p_two_sided),
        ]
        for r in report.rows
    ]
    header = ["component", "term", "kind", "response", "estimate", "se", "z", "p_value", "p_convention",
              "p_one_sided", "p_two_sided"]
    _write_csv(path, header, rows)


def profile_rows(data: PanelDataset, params: MixtureParams, labels: np.ndarray):
    """Per group: mean fitted path over its MAP members and their empirical mean."""
    out = []
    for i in range(params.k):
        members = labels == i
        n_i = int(members.sum())
        if n_i:
            fitted = np.einsum("jtc,ch->jth", data.design[members], params.theta[i]).mean(axis=0)
            # correctly rounded sums, so the column recomputes exactly from labels.csv
            Yg = data.Y[members]
            empirical = np.array(
                [[math.fsum(Yg[:, t, h].tolist()) / n_i for h in range(data.p)] for t in range(data.T)]
            )
        else:
            # no members: covariates averaged over the whole sample
            fitted = np.einsum("jtc,ch->jth", data.design, params.theta[i]).mean(axis=0)
            empirical = np.full((data.T, data.p), np.nan)
        for t, tl in enumerate(data.time_labels):
            for h, resp in enumerate(data.response_names):
                out.append((i + 1, tl, resp, fitted[t, h], empirical[t, h], n_i))
    return out


def write_fit_artifacts(data: PanelDataset, result: FitResult, out: Path) -> list[Path]:
    """params.json, posteriors.csv, labels.csv, coef_table.csv and profiles.csv."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    params = result.params
    data = matching_data(data, params)
    write_json(params_document(data, result), out / "params.json", "params")
    tau = result.posteriors.tau
    _write_csv(
        out / "posteriors.csv",
        ["subject", *[f"component_{i + 1}" for i in range(params.k)]],
        [[sid, *map(_num, tau[j])] for j, sid in enumerate(data.subject_ids)],
    )
    labels = np.asarray(result.map_labels)
    _write_csv(
        out / "labels.csv",
        ["subject", "label"],
        [[sid, int(labels[j]) + 1] for j, sid in enumerate(data.subject_ids)],
    )
    write_coef_table(data, params, out / "coef_table.csv")
    _write_csv(
        out / "profiles.csv",
        ["group", "time", "response", "predicted_mean", "empirical_mean", "n_group"],
        [[g, t, r, _num(a), _num(b), n] for g, t, r, a, b, n in profile_rows(data, params, labels)],
    )
    return [out / name for name in FIT_ARTIFACTS]


# ---------------------------------------------------------------------------
# grid artifacts


def _time_cell(seconds: float, timing: bool) -> str:
    return fmt(seconds) if timing else ""


def write_grid_table(table: GridTable, path, timing: bool = True) -> None:
    header = ["rank", "k", "phi", "m", "omega", "covariates", "loglik", "nu", "bic", "aic", "rmsd",
              "converged", "failed", "error", "time"]
    rows = []
    for rank, r in enumerate(table.rows, start=1):
        s = r.spec
        rows.append([
            rank, s.k, s.phi, s.m, s.omega, int(s.with_covariates),
            _num(r.loglik), r.nu, _num(r.bic), _num(r.aic), _num(r.rmsd),
            int(r.converged), int(r.failed), r.error, _time_cell(r.wall_time, timing),
        ])
    _write_csv(path, header, rows)


def write_table5(table: GridTable, path, timing: bool = True) -> None:
    """One row per covariate setting: the BIC-best cell and the total time spent on that setting."""
    rows = []
    for flag, name in ((False, "CPMM (no cov.)"), (True, "CPMM (with cov.)")):
        cells = [r for r in table.rows if r.spec.with_covariates == flag]
        best = table.best_by(lambda s, f=flag: s.with_covariates == f)
        if best is None:
            continue
        spent = sum(r.wall_time for r in cells)
        s = best.spec
        rows.append([
            name, _time_cell(spent, timing), _num(best.loglik), _num(best.bic), s.k,
            f"{s.phi} m={s.m}", s.omega, _num(best.rmsd),
        ])
    _write_csv(path, list(TABLE5_COLUMNS), rows)


# ---------------------------------------------------------------------------
# prediction and simulation


def write_predictions(data: PanelDataset, params: MixtureParams, rule: str, path) -> np.ndarray:
    Yhat = predict(data, params, rule)
    rows = []
    for j, sid in enumerate(data.subject_ids):
        for t, tl in enumerate(data.time_labels):
            for h, resp in enumerate(data.response_names):
                rows.append([sid, tl, resp, _num(data.Y[j, t, h]), _num(Yhat[j, t, h])])
    _write_csv(path, ["subject", "time", "response", "observed", "predicted"], rows)
    return Yhat


def rmsd_document(value: float, rule: str, data: PanelDataset) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "cpmm-prediction",
        "rmsd": value,
        "prediction_rule": rule,
        "n": data.n,
        "T": data.T,
        "p": data.p,
    }


def truth_document(params: MixtureParams, labels, seed) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "kind": "cpmm-truth", "seed": seed}
    doc.update(params.to_dict())
    doc["labels"] = [int(x) + 1 for x in labels]
    return doc


def recovery_document(report) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "kind": "cpmm-recovery"}
    doc.update(report.to_dict())
    return doc
