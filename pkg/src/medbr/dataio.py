"""CSV ingestion and design-matrix assembly."""

import csv
import json
import os
from pathlib import Path

import numpy as np

from .betabinom import BetaBinData
from .betareg import BetaRegData
from .errors import DataError

RATS_ENV = "MEDBR_RATS_CSV"
DATA_DIR = Path(__file__).resolve().parent / "data"


class Table:
    """Numeric columns of a CSV file, addressed by header name."""

    def __init__(self, path, columns, n_rows):
        self.path = str(path)
        self.columns = columns
        self.n_rows = n_rows

    def __contains__(self, name):
        return name in self.columns

    def column(self, name):
        if name not in self.columns:
            raise DataError(f"{self.path}: unknown column {name!r}; available: {', '.join(self.columns)}")
        values = self.columns[name]
        if isinstance(values, _BadColumn):
            raise DataError(f"{self.path}: row {values.row}, column {name!r}: cannot parse {values.text!r} as a number")
        return values

    def subset(self, mask):
        mask = np.asarray(mask, dtype=bool)
        cols = {k: (v if isinstance(v, _BadColumn) else v[mask]) for k, v in self.columns.items()}
        return Table(self.path, cols, int(mask.sum()))


class _BadColumn:
    # parse failures surface only when the column is actually used
    def __init__(self, row, text):
        self.row = row
        self.text = text


def read_table(path) -> Table:
    """Read a headed CSV of decimal numbers.

    Rows are numbered from 1 for the first data row in error messages.
    """
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: cannot read file ({exc.strerror or exc})") from None
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: file is empty")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows after the header")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    columns = {}
    for j, name in enumerate(header):
        values = np.empty(len(body))
        bad = None
        for i, row in enumerate(body):
            if len(row) != len(header):
                raise DataError(f"{path}: row {i + 1} has {len(row)} fields, header has {len(header)}")
            text = row[j].strip()
            try:
                values[i] = float(text)
            except ValueError:
                bad = _BadColumn(i + 1, text)
                break
        columns[name] = bad if bad is not None else values
    return Table(path, columns, len(body))


def design_matrix(table: Table, cols, intercept=True):
    """Stack the named columns, with a leading column of ones if requested."""
    parts = [np.ones(table.n_rows)] if intercept else []
    for name in cols:
        col = table.column(name)
        bad = np.flatnonzero(~np.isfinite(col))
        if bad.size:
            raise DataError(f"{table.path}: row {bad[0] + 1}, column {name!r}: non-finite value")
        parts.append(col)
    if not parts:
        raise DataError(f"{table.path}: design has no columns")
    return np.column_stack(parts)


def design_names(cols, intercept, prefix):
    names = [f"{prefix}0"] if intercept else []
    names += [f"{prefix}[{c}]" for c in cols]
    return names


def _integer_column(table, name):
    col = table.column(name)
    bad = np.flatnonzero(~np.isfinite(col) | (col != np.round(col)))
    if bad.size:
        raise DataError(f"{table.path}: row {bad[0] + 1}, column {name!r}: expected an integer, got {col[bad[0]]!r}")
    return col.astype(np.int64)


def betareg_data(table, response, mean_cols, prec_cols, mean_intercept=True, prec_intercept=True):
    y = table.column(response)
    bad = np.flatnonzero(~((y > 0) & (y < 1)))
    if bad.size:
        raise DataError(f"{table.path}: row {bad[0] + 1}, column {response!r}: "
                        f"response {y[bad[0]]!r} is not strictly inside (0, 1)")
    X = design_matrix(table, mean_cols, mean_intercept)
    Z = design_matrix(table, prec_cols, prec_intercept)
    try:
        return BetaRegData(y, X, Z)
    except DataError as exc:
        raise DataError(f"{table.path}: {exc}") from None


def betabin_data(table, successes, trials, mean_cols, prec_cols, mean_intercept=True, prec_intercept=True):
    y = _integer_column(table, successes)
    m = _integer_column(table, trials)
    bad = np.flatnonzero((m < 1) | (y < 0) | (y > m))
    if bad.size:
        i = bad[0]
        raise DataError(f"{table.path}: row {i + 1}: need 0 <= {successes} <= {trials} and {trials} >= 1, "
                        f"got {y[i]} of {m[i]}")
    X = design_matrix(table, mean_cols, mean_intercept)
    Z = design_matrix(table, prec_cols, prec_intercept)
    try:
        return BetaBinData(y, m, X, Z)
    except DataError as exc:
        raise DataError(f"{table.path}: {exc}") from None


def rats_path():
    """Location of the rat teratology CSV: ``$MEDBR_RATS_CSV`` or the packaged copy."""
    env = os.environ.get(RATS_ENV)
    return Path(env) if env else DATA_DIR / "rats.csv"


def load_rats(max_litter=None) -> Table:
    """Rat teratology table (columns m, y, x1..x4), optionally restricted to ``m <= max_litter``."""
    path = rats_path()
    if not path.is_file():
        raise DataError(f"rat teratology fixture not found at {path}; "
                        f"place rats.csv there or point {RATS_ENV} at a copy")
    table = read_table(path)
    if max_litter is not None:
        table = table.subset(table.column("m") <= max_litter)
    return table


def resolve_data_path(spec, base_dir=None):
    """``package:NAME`` refers to the packaged data directory; relative paths resolve against ``base_dir``."""
    spec = str(spec)
    if spec.startswith("package:"):
        name = spec.split(":", 1)[1]
        if name == "rats.csv":
            return rats_path()
        return DATA_DIR / name
    path = Path(spec)
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    return path


def format_number(x):
    """17 significant digits; non-finite values become ``null``."""
    x = float(x)
    if not np.isfinite(x):
        return "null"
    return "%.17g" % x


def to_json(obj, indent=2, _level=0):
    """Serialize nested dicts/lists of numbers and strings with deterministic number formatting."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {to_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(to_json(v, indent, _level + 1) for v in obj) + "]"
        items = [pad + to_json(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_number(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")
