"""Long-format results tables and CSV input/output."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .domain import Dataset, DatasetError, validate_dataset

COLUMNS = ("experiment", "estimator", "n", "lambda", "rep", "metric", "value")


class SchemaError(DatasetError):
    """CSV columns do not match what the command needs."""


def fmt(v) -> str:
    """Shortest-safe text for a number: 17 significant digits for floats."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return format(v, ".17g")


def _parse(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        return float(text)


@dataclass(frozen=True)
class Row:
    experiment: str
    estimator: str
    n: Optional[int]
    lam: Optional[float]
    rep: Optional[int]
    metric: str
    value: float

    def cells(self) -> list:
        return [self.experiment, self.estimator, fmt(self.n), fmt(self.lam), fmt(self.rep), self.metric,
                fmt(self.value)]


@dataclass
class ResultsTable:
    """Append-only list of result rows, written in one piece."""

    rows: list = field(default_factory=list)
    extras: dict = field(default_factory=dict, compare=False, repr=False)

    def append(self, experiment, estimator, n, lam, rep, metric, value) -> None:
        self.rows.append(Row(experiment, estimator, n, lam, rep, metric, float(value)))

    def extend(self, rows: Iterable[Row]) -> None:
        self.rows.extend(rows)

    def __len__(self) -> int:
        return len(self.rows)

    def select(self, **crit) -> list:
        key = {"lambda": "lam"}
        return [r for r in self.rows if all(getattr(r, key.get(k, k)) == v for k, v in crit.items())]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write(path, self.to_csv_text())

    @classmethod
    def read_csv(cls, path) -> "ResultsTable":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != COLUMNS:
                raise SchemaError(f"{path}: expected header {','.join(COLUMNS)}")
            table = cls()
            for line_no, cells in enumerate(reader, start=2):
                if len(cells) != len(COLUMNS):
                    raise SchemaError(f"{path}:{line_no}: expected {len(COLUMNS)} fields, got {len(cells)}")
                exp, est, n, lam, rep, metric, value = cells
                table.rows.append(Row(exp, est, _parse(n), None if lam == "" else float(lam), _parse(rep),
                                      metric, float(value)))
            return table


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# --- dataset CSVs ---------------------------------------------------------------

def _read_table(path) -> tuple:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader, None)
    if not header:
        raise SchemaError(f"{path}: missing header row")
    header = [h.strip() for h in header]
    data = []
    for line_no, cells in enumerate(reader, start=2):
        if not cells:
            continue
        if len(cells) != len(header):
            raise SchemaError(f"{path}: row {line_no} has {len(cells)} fields, header has {len(header)}")
        try:
            data.append([float(c) for c in cells])
        except ValueError as exc:
            raise SchemaError(f"{path}: row {line_no}: {exc}") from exc
    if not data:
        raise SchemaError(f"{path}: no data rows")
    return header, np.asarray(data, dtype=float)


def read_matrix(path) -> tuple:
    """Header and float matrix of a headed CSV (``#`` lines skipped)."""
    return _read_table(path)


def load_dataset_csv(path, treatment: str = "treatment", outcome: str = "outcome",
                     y0: Optional[str] = None, y1: Optional[str] = None,
                     exclude: Sequence[str] = (), counterfactual: Optional[str] = None) -> Dataset:
    """Build a :class:`Dataset` from a CSV.

    Covariates are all columns not named as treatment, outcome, ground-truth
    or excluded.  Ground truth may be given as ``y0``/``y1`` columns or as a
    ``counterfactual`` column paired with the factual outcome.
    """
    header, M = _read_table(path)
    named = [treatment, outcome] + [c for c in (y0, y1, counterfactual) if c] + list(exclude)
    missing = [c for c in named if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    col = {h: i for i, h in enumerate(header)}
    A_raw = M[:, col[treatment]]
    bad = np.flatnonzero((A_raw != 0.0) & (A_raw != 1.0))
    if bad.size:
        raise SchemaError(f"{path}: row {int(bad[0]) + 2}: treatment value {A_raw[bad[0]]!r} is not 0/1")
    A = A_raw.astype(np.int64)
    Y = M[:, col[outcome]]
    cov = [h for h in header if h not in named]
    if not cov:
        raise SchemaError(f"{path}: no covariate columns left")
    X = M[:, [col[h] for h in cov]]
    Y0 = Y1 = None
    if y0 and y1:
        Y0, Y1 = M[:, col[y0]], M[:, col[y1]]
    elif counterfactual:
        cf = M[:, col[counterfactual]]
        Y0 = np.where(A == 1, cf, Y)
        Y1 = np.where(A == 1, Y, cf)
    ds = Dataset(X, A, Y, Y0=Y0, Y1=Y1, columns=tuple(cov))
    validate_dataset(ds)
    return ds


def write_dataset_csv(path, ds: Dataset, treatment: str = "treatment", outcome: str = "outcome",
                      names: Optional[Sequence[str]] = None, ground_truth: bool = False) -> None:
    names = list(names or ds.columns or [f"x{j}" for j in range(ds.d)])
    header = names + [treatment, outcome]
    cols = [ds.X[:, j] for j in range(ds.d)] + [ds.A, ds.Y]
    if ground_truth and ds.has_potential_outcomes:
        header += ["y0", "y1"]
        cols += [ds.Y0, ds.Y1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in zip(*cols):
        w.writerow([fmt(v) for v in row])
    atomic_write(path, buf.getvalue())


def write_bounds_csv(path, lower, upper, lam: float, config_hash: str, row_ids=None) -> None:
    """Per-row bounds with a ``#`` header comment carrying the config hash."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    row_ids = np.arange(lower.size) if row_ids is None else row_ids
    buf = io.StringIO()
    buf.write(f"# config_sha256={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row_id", "lower", "upper", "lambda"])
    for i, lo, hi in zip(row_ids, lower, upper):
        w.writerow([fmt(int(i)), fmt(lo), fmt(hi), fmt(lam)])
    atomic_write(path, buf.getvalue())


def read_bounds_csv(path) -> dict:
    header, M = _read_table(path)
    return {h: M[:, i] for i, h in enumerate(header)}
