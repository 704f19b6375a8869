"""Data model shared by every module: feature tables, covariate specs,
design matrices, stratified splits and CSV ingestion."""

from __future__ import annotations

import csv
import fnmatch
import hashlib
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

MISSING_TOKENS = frozenset({"", "na", "nan", "null"})
_PC_TOKEN = re.compile(r"^substitute_pc\((\d+)\)$")


class DebiasError(Exception):
    """Base class; ``exit_code`` is what the command line returns."""

    exit_code = 1


class ConfigError(DebiasError, ValueError):
    exit_code = 2


class DataError(DebiasError, ValueError):
    exit_code = 3


class NumericalError(DebiasError, ArithmeticError):
    exit_code = 4


def derive_seed(seed: int, purpose: str) -> int:
    """Stable sub-seed from a master seed and a purpose string."""
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# --------------------------------------------------------------------------
# Feature table
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DropReport:
    n_read: int
    n_dropped: int
    reasons: dict[int, str] = field(default_factory=dict)  # data row index -> reason


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _as_covariate(values: Any) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype.kind in "biuf":
        return arr.astype(np.float64)
    return np.array([str(v) for v in arr], dtype=object)


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Subjects x features matrix with a group label and named covariates.

    Numeric covariates are stored as float64, categorical ones as arrays of
    ``str``. All arrays are read-only.
    """

    subject_id: np.ndarray
    group: np.ndarray
    values: np.ndarray
    feature_names: tuple[str, ...]
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    drop_report: DropReport | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {values.shape}")
        n, f = values.shape
        names = tuple(str(s) for s in self.feature_names)
        if n < 1 or f < 1:
            raise DataError(f"table needs N >= 1 and F >= 1, got {n}x{f}")
        if len(names) != f:
            raise DataError(f"{len(names)} feature names for {f} columns")
        if len(set(names)) != f:
            dup = sorted({s for s in names if names.count(s) > 1})
            raise DataError(f"duplicate feature names: {dup}")
        bad = np.argwhere(~np.isfinite(values))
        if len(bad):
            rows = sorted({int(r) for r, _ in bad})
            raise DataError(f"missing or non-finite feature values in rows {rows[:20]}")
        sid = np.array([str(s) for s in self.subject_id], dtype=object)
        grp = np.array([str(g) for g in self.group], dtype=object)
        if len(sid) != n or len(grp) != n:
            raise DataError("subject_id/group length does not match number of rows")
        if len(set(sid)) != n:
            seen: set[str] = set()
            dups = [s for s in sid if s in seen or seen.add(s)]
            raise DataError(f"duplicate subject_id: {sorted(set(dups))[:10]}")
        covs = {}
        for name, col in self.covariates.items():
            col = _as_covariate(col)
            if col.shape != (n,):
                raise DataError(f"covariate {name!r} has shape {col.shape}, expected ({n},)")
            if col.dtype.kind == "f" and not np.all(np.isfinite(col)):
                raise DataError(f"covariate {name!r} has missing values")
            covs[str(name)] = _readonly(col)
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "subject_id", _readonly(sid))
        object.__setattr__(self, "group", _readonly(grp))
        object.__setattr__(self, "covariates", covs)

    @property
    def n_subjects(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def is_categorical(self, name: str) -> bool:
        return self.covariates[name].dtype == object

    def labels(self, group_by: str | None = None) -> np.ndarray:
        """Group labels: the table's own group column, or a covariate as strings."""
        if group_by in (None, "group"):
            return self.group
        if group_by not in self.covariates:
            raise DataError(f"unknown grouping column {group_by!r}")
        col = self.covariates[group_by]
        if col.dtype == object:
            return col
        return np.array([repr(float(v)) for v in col], dtype=object)

    def group_levels(self, group_by: str | None = None) -> tuple[str, ...]:
        return tuple(sorted(set(self.labels(group_by))))

    def feature(self, name: str) -> np.ndarray:
        return self.values[:, self.feature_names.index(name)]

    def with_values(self, values: np.ndarray) -> FeatureTable:
        return FeatureTable(self.subject_id, self.group, values, self.feature_names, self.covariates)

    def with_covariates(self, **columns: Any) -> FeatureTable:
        covs = dict(self.covariates)
        covs.update(columns)
        return FeatureTable(self.subject_id, self.group, self.values, self.feature_names, covs)

    def take(self, indices: Sequence[int] | np.ndarray) -> FeatureTable:
        idx = np.asarray(indices, dtype=np.intp)
        return FeatureTable(
            self.subject_id[idx],
            self.group[idx],
            self.values[idx],
            self.feature_names,
            {k: v[idx] for k, v in self.covariates.items()},
        )

    def select_features(self, names: Sequence[str]) -> FeatureTable:
        cols = [self.feature_names.index(n) for n in names]
        return FeatureTable(self.subject_id, self.group, self.values[:, cols], tuple(names), self.covariates)

    def allclose(self, other: FeatureTable, atol: float = 1e-12) -> bool:
        if self.feature_names != other.feature_names or self.values.shape != other.values.shape:
            return False
        if not (np.array_equal(self.subject_id, other.subject_id) and np.array_equal(self.group, other.group)):
            return False
        if set(self.covariates) != set(other.covariates):
            return False
        for k, a in self.covariates.items():
            b = other.covariates[k]
            if a.dtype != b.dtype:
                return False
            if a.dtype == object:
                if not np.array_equal(a, b):
                    return False
            elif not np.allclose(a, b, rtol=0, atol=atol):
                return False
        return bool(np.allclose(self.values, other.values, rtol=0, atol=atol))


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------

_SCHEMA_KEYS = {"subject_col", "group_col", "feature_cols", "covariates"}


@dataclass(frozen=True)
class TableSchema:
    """Column roles of an input CSV.

    ``feature_cols`` is an explicit list of column names or a single glob
    pattern such as ``"vol_*"``. ``covariates`` maps column name to
    ``"numeric"`` or ``"categorical"``.
    """

    subject_col: str
    group_col: str
    feature_cols: tuple[str, ...] | str
    covariates: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.feature_cols, str):
            object.__setattr__(self, "feature_cols", tuple(self.feature_cols))
        for name, role in self.covariates.items():
            if role not in ("numeric", "categorical"):
                raise ConfigError(f"covariate {name!r}: role must be numeric or categorical, got {role!r}")

    @classmethod
    def from_mapping(cls, m: Mapping[str, Any]) -> TableSchema:
        unknown = set(m) - _SCHEMA_KEYS
        if unknown:
            raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
        try:
            return cls(m["subject_col"], m["group_col"], m["feature_cols"], dict(m.get("covariates") or {}))
        except KeyError as e:
            raise ConfigError(f"schema is missing {e.args[0]!r}") from None

    def to_mapping(self) -> dict[str, Any]:
        fc = self.feature_cols if isinstance(self.feature_cols, str) else list(self.feature_cols)
        return {
            "subject_col": self.subject_col,
            "group_col": self.group_col,
            "feature_cols": fc,
            "covariates": dict(self.covariates),
        }

    def resolve_features(self, header: Sequence[str]) -> list[str]:
        if isinstance(self.feature_cols, str):
            reserved = {self.subject_col, self.group_col, *self.covariates}
            cols = [h for h in header if fnmatch.fnmatchcase(h, self.feature_cols) and h not in reserved]
            if not cols:
                raise DataError(f"feature pattern {self.feature_cols!r} matched no columns")
            return cols
        return list(self.feature_cols)


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_TOKENS


def _parse_float_column(cells: list[str], name: str, row_offset: int = 2) -> np.ndarray:
    """Parse strings to floats; missing tokens become NaN, anything else non-numeric raises."""
    out = np.empty(len(cells))
    for i, c in enumerate(cells):
        if _is_missing(c):
            out[i] = np.nan
            continue
        try:
            out[i] = float(c)
        except ValueError:
            raise DataError(f"non-numeric value {c!r} in column {name!r} at line {i + row_offset}") from None
    return out


def load_table(path: str | Path, schema: TableSchema) -> FeatureTable:
    """Read and validate a CSV; rows with missing cells are dropped and reported."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    header = [h.strip() for h in header]
    features = schema.resolve_features(header)
    required = [schema.subject_col, schema.group_col, *schema.covariates, *features]
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"{path}: missing required columns {missing}")
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"{path}: line {i + 2} has {len(r)} fields, header has {len(header)}")
    pos = {h: j for j, h in enumerate(header)}

    def column(name: str) -> list[str]:
        j = pos[name]
        return [r[j] for r in rows]

    n = len(rows)
    reasons: dict[int, str] = {}

    def mark(mask: np.ndarray, why: str) -> None:
        for i in np.flatnonzero(mask):
            reasons.setdefault(int(i), why)

    sid = column(schema.subject_col)
    grp = column(schema.group_col)
    mark(np.array([_is_missing(s) for s in sid], dtype=bool), f"missing {schema.subject_col}")
    mark(np.array([_is_missing(g) for g in grp], dtype=bool), f"missing {schema.group_col}")

    values = np.empty((n, len(features)))
    for j, name in enumerate(features):
        values[:, j] = _parse_float_column(column(name), name)
        mark(np.isnan(values[:, j]), f"missing feature {name}")

    covs: dict[str, np.ndarray] = {}
    for name, role in schema.covariates.items():
        cells = column(name)
        if role == "numeric":
            col = _parse_float_column(cells, name)
            mark(np.isnan(col), f"missing covariate {name}")
            covs[name] = col
        else:
            mark(np.array([_is_missing(c) for c in cells], dtype=bool), f"missing covariate {name}")
            covs[name] = np.array([c.strip() for c in cells], dtype=object)

    keep = np.array([i not in reasons for i in range(n)], dtype=bool)
    if not keep.any():
        raise DataError(f"{path}: no complete rows")
    report = DropReport(n_read=n, n_dropped=int((~keep).sum()), reasons=dict(sorted(reasons.items())))
    if report.n_dropped:
        log.warning("%s: dropped %d of %d rows with missing entries", path, report.n_dropped, n)
    return FeatureTable(
        np.array([s.strip() for s in sid], dtype=object)[keep],
        np.array([g.strip() for g in grp], dtype=object)[keep],
        values[keep],
        tuple(features),
        {k: v[keep] for k, v in covs.items()},
        drop_report=report,
    )


def write_table(table: FeatureTable, path: str | Path) -> TableSchema:
    """Write ``table`` as CSV with round-trip exact floats; returns the schema to reload it."""
    reserved = {"subject_id", "group", *table.covariates}
    clash = reserved.intersection(table.feature_names)
    if clash:
        raise DataError(f"feature names clash with reserved columns: {sorted(clash)}")
    covs = list(table.covariates)
    header = ["subject_id", "group", *covs, *table.feature_names]
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(table.n_subjects):
            row = [table.subject_id[i], table.group[i]]
            for c in covs:
                v = table.covariates[c][i]
                row.append(v if isinstance(v, str) else repr(float(v)))
            row.extend(repr(float(v)) for v in table.values[i])
            w.writerow(row)
    roles = {c: "categorical" if table.is_categorical(c) else "numeric" for c in covs}
    return TableSchema("subject_id", "group", tuple(table.feature_names), roles)


# --------------------------------------------------------------------------
# Covariates and design matrices
# --------------------------------------------------------------------------


def _as_name_tuple(v: Iterable[str] | str | None) -> tuple[str, ...]:
    if v is None:
        return ()
    if isinstance(v, str):
        v = [s for s in v.split(",") if s.strip()]
    return tuple(s.strip() for s in v)


@dataclass(frozen=True)
class CovariateSpec:
    """Covariates to keep (vector k) and to remove (vector r).

    ``remove`` may contain the token ``substitute_pc(m)``, which appends the
    first m principal-component scores of all features as remove columns.
    """

    keep: tuple[str, ...] = ()
    remove: tuple[str, ...] = ()
    expand_age_quadratic: bool = False

    def __post_init__(self) -> None:
        keep = _as_name_tuple(self.keep)
        remove = _as_name_tuple(self.remove)
        object.__setattr__(self, "keep", keep)
        object.__setattr__(self, "remove", remove)
        both = set(keep) & set(remove)
        if both:
            raise ConfigError(f"covariates both kept and removed: {sorted(both)}")
        if self.expand_age_quadratic and "age" not in keep:
            raise ConfigError("expand_age_quadratic requires 'age' in keep")
        if sum(bool(_PC_TOKEN.match(r)) for r in remove) > 1:
            raise ConfigError("substitute_pc may appear at most once in remove")
        for r in remove:
            if r.startswith("substitute_pc") and not _PC_TOKEN.match(r):
                raise ConfigError(f"malformed token {r!r}; expected substitute_pc(m)")

    @property
    def n_pcs(self) -> int:
        for r in self.remove:
            m = _PC_TOKEN.match(r)
            if m:
                return int(m.group(1))
        return 0

    @property
    def remove_covariates(self) -> tuple[str, ...]:
        return tuple(r for r in self.remove if not _PC_TOKEN.match(r))

    def with_pcs(self, m: int) -> CovariateSpec:
        remove = self.remove_covariates + ((f"substitute_pc({m})",) if m > 0 else ())
        return CovariateSpec(self.keep, remove, self.expand_age_quadratic)

    def validate(self, table: FeatureTable) -> None:
        missing = [c for c in (*self.keep, *self.remove_covariates) if c not in table.covariates]
        if missing:
            raise ConfigError(f"covariates not in table: {missing}")

    def to_dict(self) -> dict[str, Any]:
        return {"keep": list(self.keep), "remove": list(self.remove), "expand_age_quadratic": self.expand_age_quadratic}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CovariateSpec:
        return cls(tuple(d.get("keep", ())), tuple(d.get("remove", ())), bool(d.get("expand_age_quadratic", False)))


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Encoded regressors plus the recipe to encode new rows identically.

    ``terms`` lists ``(covariate, kind)`` with kind one of ``numeric``,
    ``categorical``, ``age_linear``, ``age_quadratic``, ``pc``.
    """

    columns: tuple[str, ...]
    values: np.ndarray
    terms: tuple[tuple[str, str], ...] = ()
    encoding_map: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    reference_levels: Mapping[str, str] = field(default_factory=dict)
    centers: Mapping[str, float] = field(default_factory=dict)

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    def to_recipe(self) -> dict[str, Any]:
        return {
            "columns": list(self.columns),
            "terms": [list(t) for t in self.terms],
            "encoding_map": {k: list(v) for k, v in self.encoding_map.items()},
            "reference_levels": dict(self.reference_levels),
            "centers": dict(self.centers),
        }

    @classmethod
    def from_recipe(cls, d: Mapping[str, Any]) -> DesignMatrix:
        cols = tuple(d["columns"])
        return cls(
            cols,
            np.zeros((0, len(cols))),
            tuple((str(a), str(b)) for a, b in d["terms"]),
            {k: tuple(v) for k, v in d["encoding_map"].items()},
            dict(d["reference_levels"]),
            {k: float(v) for k, v in d["centers"].items()},
        )

    def encode(self, table: FeatureTable, pc_scores: np.ndarray | None = None) -> DesignMatrix:
        """Re-encode another table with this matrix's levels and centering."""
        n = table.n_subjects
        blocks: list[np.ndarray] = []
        for name, kind in self.terms:
            if kind == "pc":
                if pc_scores is None:
                    raise DataError("design needs substitute-confounder scores")
                blocks.append(np.asarray(pc_scores, dtype=float).reshape(n, -1))
                continue
            if name not in table.covariates:
                raise DataError(f"covariate {name!r} missing from table")
            col = table.covariates[name]
            if kind == "categorical":
                known = {self.reference_levels[name], *self.encoding_map[name]}
                unseen = sorted(set(col) - known)
                if unseen:
                    raise DataError(f"covariate {name!r} has levels unseen at fit time: {unseen}")
                blocks.append(np.stack([col == lv for lv in self.encoding_map[name]], axis=1).astype(float).reshape(n, -1))
            else:
                if col.dtype == object:
                    raise DataError(f"covariate {name!r} must be numeric")
                x = col - self.centers.get(name, 0.0)
                blocks.append((x**2 if kind == "age_quadratic" else x).reshape(n, 1))
        values = np.hstack(blocks) if blocks else np.zeros((n, 0))
        if values.shape[1] != len(self.columns):
            raise DataError(f"design has {values.shape[1]} columns, expected {len(self.columns)}")
        return DesignMatrix(self.columns, _readonly(values), self.terms, self.encoding_map, self.reference_levels, self.centers)


def _design_from_terms(table: FeatureTable, names: Sequence[str], expand_age: bool) -> DesignMatrix:
    terms: list[tuple[str, str]] = []
    columns: list[str] = []
    enc: dict[str, tuple[str, ...]] = {}
    ref: dict[str, str] = {}
    centers: dict[str, float] = {}
    for name in names:
        col = table.covariates[name]
        if col.dtype == object:
            levels = sorted(set(col))
            ref[name] = levels[0]
            enc[name] = tuple(levels[1:])
            terms.append((name, "categorical"))
            columns.extend(f"{name}[{lv}]" for lv in levels[1:])
        elif name == "age" and expand_age:
            centers["age"] = float(np.mean(col))
            terms += [("age", "age_linear"), ("age", "age_quadratic")]
            columns += ["age_c", "age_c^2"]
        else:
            terms.append((name, "numeric"))
            columns.append(name)
    empty = DesignMatrix(tuple(columns), np.zeros((0, len(columns))), tuple(terms), enc, ref, centers)
    return empty


def dependent_columns(values: np.ndarray, names: Sequence[str], tol: float | None = None) -> list[str]:
    """Columns that add nothing to the rank of the columns before them."""
    out: list[str] = []
    kept: list[int] = []
    rank = 0
    for j in range(values.shape[1]):
        r = np.linalg.matrix_rank(values[:, kept + [j]], tol=tol)
        if r > rank:
            kept.append(j)
            rank = r
        else:
            out.append(names[j])
    return out


def _check_rank(d: DesignMatrix, label: str) -> None:
    if d.n_columns == 0:
        return
    if np.linalg.matrix_rank(d.values) < d.n_columns:
        bad = dependent_columns(d.values, d.columns)
        raise DataError(f"{label} design is rank deficient; dependent columns: {bad}")


def build_design(
    table: FeatureTable,
    spec: CovariateSpec,
    pca_basis: Any = None,
) -> tuple[DesignMatrix, DesignMatrix]:
    """Encode keep covariates into K and remove covariates into R.

    Categoricals use treatment coding with the lexicographically smallest
    level as reference. When ``spec`` requests substitute confounders the PC
    scores come from ``pca_basis`` if given, otherwise a basis is fitted to
    this table's features.
    """
    spec.validate(table)
    K = _design_from_terms(table, spec.keep, spec.expand_age_quadratic).encode(table)
    R0 = _design_from_terms(table, spec.remove_covariates, False)
    scores = None
    m = spec.n_pcs
    if m > 0:
        from . import stats

        basis = pca_basis if pca_basis is not None else stats.pca_fit(table.values, m)
        if basis.n_components < m:
            raise DataError(f"basis has {basis.n_components} components, {m} requested")
        scores = basis.transform(table.values)[:, :m]
        R0 = DesignMatrix(
            R0.columns + tuple(f"pc{i + 1}" for i in range(m)),
            R0.values,
            R0.terms + (("pc", "pc"),),
            R0.encoding_map,
            R0.reference_levels,
            R0.centers,
        )
    R = R0.encode(table, scores)
    _check_rank(K, "keep")
    _check_rank(R, "remove")
    return K, R


# --------------------------------------------------------------------------
# Splits and simple transforms
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Split:
    train_indices: np.ndarray
    test_indices: np.ndarray
    stratify_by: str
    fraction: float
    seed: int


def stratified_split(table: FeatureTable, fraction: float, seed: int, group_by: str | None = None) -> Split:
    """Per-group random split; each group contributes round(fraction * n_g) training rows."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"fraction must lie in (0, 1), got {fraction}")
    labels = table.labels(group_by)
    rng = np.random.default_rng(seed)
    train: list[np.ndarray] = []
    test: list[np.ndarray] = []
    for g in sorted(set(labels)):
        idx = np.flatnonzero(labels == g)
        if len(idx) < 2:
            raise DataError(f"group {g!r} has a single subject; cannot split")
        n_train = min(max(int(math.floor(fraction * len(idx) + 0.5)), 1), len(idx) - 1)
        perm = rng.permutation(idx)
        train.append(perm[:n_train])
        test.append(perm[n_train:])
    return Split(
        _readonly(np.sort(np.concatenate(train))),
        _readonly(np.sort(np.concatenate(test))),
        group_by or "group",
        float(fraction),
        int(seed),
    )


def relative_to_icv(table: FeatureTable, features: Sequence[str], icv: str = "icv") -> FeatureTable:
    """Divide the listed features by intracranial volume."""
    if icv not in table.covariates or table.is_categorical(icv):
        raise DataError(f"numeric covariate {icv!r} required")
    v = table.covariates[icv]
    if np.any(v <= 0):
        rows = np.flatnonzero(v <= 0)[:10].tolist()
        raise DataError(f"{icv} must be strictly positive; offending rows {rows}")
    out = np.array(table.values)
    for name in features:
        j = table.feature_names.index(name)
        out[:, j] = out[:, j] / v
    return table.with_values(out)


# --------------------------------------------------------------------------
# Canonical JSON
# --------------------------------------------------------------------------


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise NumericalError(f"cannot serialize non-finite value {x}")
    s = format(x, ".17g")
    return s if any(c in s for c in ".en") else s + ".0"


def dumps_canonical(obj: Any, indent: int = 1, _level: int = 0) -> str:
    """JSON text with sorted keys and floats written to 17 significant digits."""
    import json

    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, Mapping):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps_canonical(v, indent, _level + 1)}" for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(dumps_canonical(v) for v in obj) + "]"
        items = [pad + dumps_canonical(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")
