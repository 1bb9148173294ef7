"""CSV ingestion, run configuration and plot-data export.

The configuration file is flat ``key = value`` text; ``#`` starts a comment.
Keys (all optional unless the command needs them)::

    command        fit | cv | simulate | export-plot | predict
    responses      CSV with the response columns, the group column and any
                   binomial trials columns
    x              CSV of regularised covariates (every column used)
    a              CSV of additional covariates (every column used)
    groups         name of the group column in ``responses``
    families       comma list of  column:family[:trials_column]
    K s l          hyperparameters of a single fit
    K_set s_set l_set   CV grids, comma lists; ``a-b`` ranges allowed for K
    holdout folds  CV layout (rows per group per fold, number of folds)
    standardised_errors  divide CV errors by the predictive variance
    seed out jobs  master seed, output directory, parallel work items
    standardise intercept mixed   booleans
    mode           conditional | marginal (prediction)
    outer_tol outer_max_iter line_search reduce   numerical settings
    design N R tau stn p   simulation settings
    model plane cos_threshold   export-plot and predict inputs
"""

import csv
import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .core import Hyperparams, make_model_data
from .exceptions import DataError
from .families import ResponseFamily

COMMANDS = ("fit", "cv", "simulate", "export-plot", "predict")


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


@dataclass
class Table:
    path: str
    header: list
    rows: list  # list of lists of strings

    def column(self, name):
        try:
            j = self.header.index(name)
        except ValueError:
            raise DataError(f"{self.path}: no column named {name!r} (have {self.header})") from None
        return [row[j] for row in self.rows]

    def numeric(self, names=None):
        """Float matrix of the named columns (all columns by default)."""
        names = self.header if names is None else list(names)
        idx = []
        for name in names:
            if name not in self.header:
                raise DataError(f"{self.path}: no column named {name!r}")
            idx.append(self.header.index(name))
        out = np.empty((len(self.rows), len(idx)))
        for i, row in enumerate(self.rows):
            for c, j in enumerate(idx):
                out[i, c] = _to_float(row[j], self.path, i + 2, self.header[j])
        return out


def _to_float(cell, path, line, column):
    text = cell.strip()
    if text == "":
        raise DataError(f"{path}:{line}: missing value in column {column!r}")
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: non-numeric value {cell!r} in column {column!r}") from None
    if not np.isfinite(value):
        raise DataError(f"{path}:{line}: non-finite value {cell!r} in column {column!r}")
    return value


def read_table(path):
    """Read a UTF-8 CSV with a header row; every row must be complete."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise DataError(f"{path}: empty file, a header row is required") from None
            rows = []
            for row in reader:
                if not row:
                    continue
                if len(row) != len(header):
                    raise DataError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
                rows.append(row)
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    return Table(str(path), header, rows)


def write_table(path, header, rows):
    """Write rows with a one-line header; floats keep full precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_matrix(path, names, M):
    write_table(path, names, np.asarray(M).tolist())


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int_list(text):
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _parse_float_list(text):
    return [float(p) for p in str(text).split(",") if p.strip()]


def _fmt_list(values):
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)


@dataclass
class RunConfig:
    command: str = "fit"
    responses: str = None
    x: str = None
    a: str = None
    groups: str = None
    families: list = field(default_factory=list)  # (column, family, trials_column or None)
    K: int = 2
    s: float = 0.5
    l: float = 4.0
    K_set: list = field(default_factory=lambda: list(range(1, 9)))
    s_set: list = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    l_set: list = field(default_factory=lambda: [4.0])
    holdout: int = 2
    folds: int = 5
    standardised_errors: bool = False
    seed: int = 0
    out: str = "out"
    jobs: int = None
    standardise: bool = True
    intercept: bool = True
    mixed: bool = True
    mode: str = "conditional"
    outer_tol: float = 1e-5
    outer_max_iter: int = 100
    line_search: str = "halving"
    reduce: str = "auto"
    design: str = "gauss_bundles"
    N: int = 10
    R: int = 10
    tau: float = 0.5
    stn: float = 3.0
    p: int = 150
    model: str = None
    plane: list = field(default_factory=lambda: [1, 2])
    cos_threshold: float = 0.7

    def validate(self):
        if self.command not in COMMANDS:
            raise DataError(f"unknown command {self.command!r}; expected one of {COMMANDS}")
        if self.mode not in ("conditional", "marginal"):
            raise DataError(f"mode must be conditional or marginal, got {self.mode!r}")
        if len(self.plane) != 2:
            raise DataError("plane needs two component indices")
        for col, fam, trials in self.families:
            if fam == "binomial" and not trials:
                raise DataError(f"binomial response {col!r} must declare a trials column (col:binomial:trials)")
            ResponseFamily(fam, trials=[1] if fam == "binomial" else None)
        return self

    def hyperparams(self):
        return Hyperparams(K=self.K, s=self.s, l=self.l, outer_tol=self.outer_tol,
                           outer_max_iter=self.outer_max_iter, line_search=self.line_search,
                           reduce=self.reduce, seed=self.seed)


def _parse_families(text):
    out = []
    for item in str(text).split(","):
        item = item.strip()
        if not item:
            continue
        parts = [p.strip() for p in item.split(":")]
        if len(parts) < 2 or len(parts) > 3:
            raise ValueError(f"family entry {item!r} must be column:family[:trials_column]")
        out.append((parts[0], parts[1].lower(), parts[2] if len(parts) == 3 else None))
    return out


def _fmt_families(fams):
    return ",".join(":".join(p for p in entry if p) for entry in fams)


_PARSERS = {
    "families": (_parse_families, _fmt_families),
    "K_set": (_parse_int_list, _fmt_list),
    "s_set": (_parse_float_list, _fmt_list),
    "l_set": (_parse_float_list, _fmt_list),
    "plane": (_parse_int_list, _fmt_list),
}
_TYPES = {f.name: f.type for f in fields(RunConfig)}
_INT_KEYS = {"K", "holdout", "folds", "seed", "jobs", "outer_max_iter", "N", "R", "p"}
_FLOAT_KEYS = {"s", "l", "outer_tol", "tau", "stn", "cos_threshold"}
_BOOL_KEYS = {"standardised_errors", "standardise", "intercept", "mixed"}


def parse_value(key, text):
    if key not in _TYPES:
        raise DataError(f"unknown configuration key {key!r}")
    try:
        if key in _PARSERS:
            return _PARSERS[key][0](text)
        if key in _INT_KEYS:
            return int(text)
        if key in _FLOAT_KEYS:
            return float(text)
        if key in _BOOL_KEYS:
            return _parse_bool(text)
        return str(text).strip()
    except ValueError as exc:
        raise DataError(f"bad value for {key!r}: {exc}") from None


def format_value(key, value):
    if key in _PARSERS:
        return _PARSERS[key][1](value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text, source="<config>"):
    """Parse ``key = value`` lines into a :class:`RunConfig`."""
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            setattr(cfg, key, parse_value(key, value))
        except DataError as exc:
            raise DataError(f"{source}:{lineno}: {exc}") from None
    return cfg


def read_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read(), str(path))
    except FileNotFoundError:
        raise DataError(f"{path}: configuration file not found") from None


def serialise_config(cfg):
    """Canonical text form; every non-empty field, one per line."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        lines.append(f"{f.name} = {format_value(f.name, value)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def ingest(cfg):
    """Assemble :class:`ModelData` from the CSV files named in ``cfg``."""
    if not cfg.responses or not cfg.x:
        raise DataError("configuration needs both 'responses' and 'x' files")
    if not cfg.families:
        raise DataError("configuration needs 'families' (column:family[:trials_column])")
    if not cfg.groups:
        raise DataError("configuration needs the 'groups' column name")
    resp = read_table(cfg.responses)
    xt = read_table(cfg.x)
    tables = [resp, xt]
    at = None
    if cfg.a:
        at = read_table(cfg.a)
        tables.append(at)
    n = len(resp.rows)
    for t in tables[1:]:
        if len(t.rows) != n:
            raise DataError(f"{t.path} has {len(t.rows)} data rows but {resp.path} has {n}")
    if n == 0:
        raise DataError(f"{resp.path}: no data rows")
    cols = [c for c, _, _ in cfg.families]
    Y = resp.numeric(cols)
    families = []
    for k, (col, kind, trials_col) in enumerate(cfg.families):
        trials = resp.numeric([trials_col])[:, 0] if kind == "binomial" else None
        try:
            fam = ResponseFamily(kind, trials=trials)
        except DataError as exc:
            raise DataError(f"{resp.path}: response {col!r}: {exc}") from None
        _validate_rows(fam, Y[:, k], resp.path, col)
        families.append(fam)
    X = xt.numeric()
    A = at.numeric() if at is not None else None
    labels = resp.column(cfg.groups)
    try:
        return make_model_data(Y, families, X, labels, A=A, standardise=cfg.standardise,
                               intercept=cfg.intercept, y_names=cols, x_names=xt.header,
                               a_names=at.header if at is not None else [])
    except DataError as exc:
        raise DataError(f"{xt.path}: {exc}") from None


def _validate_rows(fam, y, path, col):
    try:
        fam.validate(y, col)
    except DataError as exc:
        msg = str(exc)
        # translate the data-row number into a file line (header is line 1)
        if "(row " in msg:
            head, row = msg.rsplit("(row ", 1)
            msg = f"{head}(line {int(row.rstrip(')')) + 1})"
        raise DataError(f"{path}: {msg}") from None


# ---------------------------------------------------------------------------
# model files and plot data
# ---------------------------------------------------------------------------


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path):
    from .core import FittedModel

    try:
        with open(path, encoding="utf-8") as fh:
            return FittedModel.from_dict(json.load(fh))
    except FileNotFoundError:
        raise DataError(f"{path}: model file not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def export_plot_data(model, plane=(1, 2), cos_threshold=0.7):
    """Correlation-circle data for the component plane ``plane`` (1-based).

    Returns ``{"variables": [...], "predictors": [...], "inertia": [...]}``.
    A variable is kept when its cosine with the plane exceeds the threshold.
    Predictors are the X-parts ``F gamma_k`` of each linear predictor,
    P-projected onto the plane.
    """
    a, b = (int(i) for i in plane)
    K = model.K
    if not (1 <= a <= K and 1 <= b <= K) or a == b:
        raise DataError(f"plane {plane} needs two distinct axes in 1..{K}")
    corr = model.correlations
    variables = []
    for j, name in enumerate(model.x_names):
        c1, c2 = float(corr[j, a - 1]), float(corr[j, b - 1])
        variables.append((name, c1, c2, bool(np.hypot(c1, c2) > cos_threshold)))
    F = model.components
    n = F.shape[0]
    pw = model.hyperparams.get("pw")
    pw = np.full(n, 1.0 / n) if pw is None else np.asarray(pw, dtype=float)
    predictors = []
    for k, name in enumerate(model.y_names):
        eta_x = F @ model.gamma[k]
        norm = np.sqrt(np.sum(pw * eta_x**2))
        coords = []
        for axis in (a, b):
            f = F[:, axis - 1]
            coords.append(0.0 if norm == 0 else float(np.sum(pw * eta_x * f) / (norm * np.sqrt(np.sum(pw * f**2)))))
        predictors.append((name, coords[0], coords[1]))
    inertia = [(h + 1, float(v)) for h, v in enumerate(model.inertia_pct)]
    return {"variables": variables, "predictors": predictors, "inertia": inertia}


def write_plot_data(plot, prefix):
    """Write the three CSVs of :func:`export_plot_data`; returns their paths."""
    paths = [f"{prefix}_variables.csv", f"{prefix}_predictors.csv", f"{prefix}_inertia.csv"]
    write_table(paths[0], ["variable", "cos_axis1", "cos_axis2", "kept"], plot["variables"])
    write_table(paths[1], ["response", "cos_axis1", "cos_axis2"], plot["predictors"])
    write_table(paths[2], ["component", "inertia_pct"], plot["inertia"])
    return paths


class OutputSet:
    """Tracks files written by a command and removes them if it fails."""

    def __init__(self, directory):
        self.directory = directory
        self.paths = []

    def path(self, name):
        p = os.path.join(self.directory, name)
        self.paths.append(p)
        return p

    def __enter__(self):
        os.makedirs(self.directory, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            for p in self.paths:
                if os.path.exists(p):
                    os.remove(p)
        return False
