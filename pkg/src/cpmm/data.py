"""Balanced panel container and long-format CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import BalanceError, DataError, DuplicateRecordError, ParseError


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """``n`` subjects, each a ``T x p`` response matrix and a ``T x q`` covariate matrix.

    ``Y`` has shape ``(n, T, p)`` and ``X`` shape ``(n, T, q)``.  Arrays are
    stored read-only so a dataset can be shared across threads.
    """

    Y: np.ndarray
    X: np.ndarray
    subject_ids: tuple = ()
    time_labels: tuple = ()
    response_names: tuple = ()
    covariate_names: tuple = ()
    _design: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        Y = _frozen(self.Y)
        if Y.ndim != 3:
            raise DataError(f"Y must have shape (n, T, p), got {Y.shape}")
        n, T, p = Y.shape
        X = self.X
        X = np.zeros((n, T, 0)) if X is None else np.asarray(X, dtype=float)
        if X.ndim != 3 or X.shape[:2] != (n, T):
            raise DataError(f"X must have shape (n, T, q) = ({n}, {T}, q), got {X.shape}")
        X = _frozen(X)
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(X))):
            raise DataError("dataset contains non-finite entries")
        q = X.shape[2]
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids) or tuple(str(j + 1) for j in range(n)))
        object.__setattr__(self, "time_labels", tuple(self.time_labels) or tuple(str(t + 1) for t in range(T)))
        object.__setattr__(
            self, "response_names", tuple(self.response_names) or tuple(f"y{h + 1}" for h in range(p))
        )
        object.__setattr__(
            self, "covariate_names", tuple(self.covariate_names) or tuple(f"x{c + 1}" for c in range(q))
        )
        if len(self.subject_ids) != n or len(self.time_labels) != T:
            raise DataError("subject or time labels do not match the data shape")
        if len(self.response_names) != p or len(self.covariate_names) != q:
            raise DataError("response or covariate names do not match the data shape")
        design = np.concatenate([np.broadcast_to(np.eye(T), (n, T, T)), X], axis=2)
        design.setflags(write=False)
        object.__setattr__(self, "_design", design)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def T(self) -> int:
        return self.Y.shape[1]

    @property
    def p(self) -> int:
        return self.Y.shape[2]

    @property
    def q(self) -> int:
        return self.X.shape[2]

    @property
    def design(self) -> np.ndarray:
        """``(n, T, T + q)`` design: a ``T x T`` identity block (time intercepts) then the covariates."""
        return self._design

    def without_covariates(self) -> "PanelDataset":
        return PanelDataset(self.Y, None, self.subject_ids, self.time_labels, self.response_names, ())

    def scaled(self, c: float) -> "PanelDataset":
        return PanelDataset(
            c * self.Y, self.X, self.subject_ids, self.time_labels, self.response_names, self.covariate_names
        )

    def subset(self, index) -> "PanelDataset":
        index = np.asarray(index)
        return PanelDataset(
            self.Y[index],
            self.X[index],
            tuple(self.subject_ids[i] for i in index),
            self.time_labels,
            self.response_names,
            self.covariate_names,
        )

    def equals(self, other: "PanelDataset") -> bool:
        return (
            np.array_equal(self.Y, other.Y)
            and np.array_equal(self.X, other.X)
            and self.subject_ids == other.subject_ids
            and self.time_labels == other.time_labels
            and self.response_names == other.response_names
            and self.covariate_names == other.covariate_names
        )


def _parse_float(text: str, column: str, line: int) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"line {line}: column {column!r} value {text!r} is not numeric") from None
    if not math.isfinite(value):
        raise ParseError(f"line {line}: column {column!r} value {text!r} is not finite")
    return value


def _check_spacing(labels: Sequence[str]) -> None:
    try:
        values = [float(x) for x in labels]
    except ValueError:
        return
    if len(values) < 3:
        return
    gaps = np.diff(values)
    if np.any(gaps == 0) or not np.allclose(gaps, gaps[0], rtol=1e-9, atol=0.0):
        raise DataError(f"numeric time labels {list(labels)} are not equally spaced")


def ingest(
    path,
    responses: Sequence[str],
    covariates: Sequence[str] = (),
    subject: str = "subject",
    time: str = "time",
    time_order: Sequence[str] | None = None,
) -> PanelDataset:
    """Read a long-format CSV (one row per subject and occasion) into a balanced panel.

    Columns are bound by name.  Time labels keep their first-appearance order
    unless ``time_order`` is given; numeric labels must be equally spaced.
    Subjects keep their first-appearance order.
    """
    path = Path(path)
    responses, covariates = list(responses), list(covariates)
    if not responses:
        raise DataError("at least one response column is required")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, strict=True)
        header = reader.fieldnames or []
        missing = [c for c in [subject, time, *responses, *covariates] if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        cells: dict[tuple[str, str], tuple[list[float], list[float]]] = {}
        subjects: list[str] = []
        seen_subjects: set[str] = set()
        times: list[str] = []
        for line, row in enumerate(reader, start=2):
            sid, tl = row[subject], row[time]
            if sid is None or tl is None or sid == "" or tl == "":
                raise ParseError(f"line {line}: empty subject or time field")
            key = (sid, tl)
            if key in cells:
                raise DuplicateRecordError(f"line {line}: duplicate record for subject {sid!r} at time {tl!r}")
            y = [_parse_float(row[c], c, line) for c in responses]
            x = [_parse_float(row[c], c, line) for c in covariates]
            cells[key] = (y, x)
            if sid not in seen_subjects:
                seen_subjects.add(sid)
                subjects.append(sid)
            if tl not in times:
                times.append(tl)
    if not subjects:
        raise DataError(f"{path}: no records")
    if time_order is not None:
        order = [str(t) for t in time_order]
        extra = [t for t in times if t not in order]
        if extra:
            raise DataError(f"time labels {extra} are not listed in time_order")
        if len(set(order)) != len(order):
            raise DataError("time_order has repeated labels")
        times = order
    _check_spacing(times)
    n, T, p, q = len(subjects), len(times), len(responses), len(covariates)
    Y = np.empty((n, T, p))
    X = np.empty((n, T, q))
    for j, sid in enumerate(subjects):
        for t, tl in enumerate(times):
            try:
                y, x = cells[(sid, tl)]
            except KeyError:
                raise BalanceError(f"subject {sid!r} has no record at time {tl!r}") from None
            Y[j, t] = y
            X[j, t] = x
    return PanelDataset(Y, X, tuple(subjects), tuple(times), tuple(responses), tuple(covariates))


def fmt(x: float) -> str:
    """17 significant digits: exact round trip through text."""
    return format(float(x), ".17g")


def write_long_csv(data: PanelDataset, path, subject: str = "subject", time: str = "time") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([subject, time, *data.response_names, *data.covariate_names])
        for j, sid in enumerate(data.subject_ids):
            for t, tl in enumerate(data.time_labels):
                w.writerow([sid, tl, *map(fmt, data.Y[j, t]), *map(fmt, data.X[j, t])])
