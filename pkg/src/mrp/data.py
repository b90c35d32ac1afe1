"""Observation tables and poststratification tables."""
from __future__ import annotations

import hashlib
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

__all__ = [
    "Dataset",
    "PoststratTable",
    "AlignmentReport",
    "DataError",
    "MissingRowsWarning",
    "load_csv",
    "build_poststrat_table",
    "validate_alignment",
]

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class DataError(ValueError):
    pass


class MissingRowsWarning(UserWarning):
    pass


def _as_levels(values):
    return [str(v) for v in values]


class Dataset:
    """Immutable columnar table whose columns are numeric or categorical.

    Categorical values are stored as strings with an explicit, ordered level
    list; a level may be declared without appearing in the data.

    Parameters
    ----------
    frame : pandas.DataFrame
        Source data. It is copied.
    schema : dict, optional
        Column name -> ``"numeric"``, ``"categorical"`` or an explicit list of
        levels. Columns not in the schema are inferred from their dtype
        (numeric dtypes stay numeric, everything else is categorical).
    """

    def __init__(self, frame, schema=None, n_dropped=0):
        if isinstance(frame, Dataset):
            frame = frame.frame
        if not isinstance(frame, pd.DataFrame):
            frame = pd.DataFrame(frame)
        schema = dict(schema or {})
        cols = {}
        kinds = {}
        for name in frame.columns:
            col = frame[name]
            kind = schema.get(name)
            if kind is None:
                if isinstance(col.dtype, pd.CategoricalDtype):
                    kind = list(col.cat.categories)
                elif pd.api.types.is_bool_dtype(col) or pd.api.types.is_numeric_dtype(col):
                    kind = NUMERIC
                else:
                    kind = CATEGORICAL
            if kind == NUMERIC:
                try:
                    values = pd.to_numeric(col, errors="raise").astype(float)
                except (ValueError, TypeError) as exc:
                    raise DataError(f"column {name!r} is not numeric: {exc}") from None
                cols[name] = values.reset_index(drop=True)
                kinds[name] = NUMERIC
            else:
                as_str = col.astype(object).where(col.notna(), None)
                as_str = as_str.map(lambda v: None if v is None else str(v))
                if kind == CATEGORICAL:
                    levels = list(dict.fromkeys(v for v in as_str if v is not None))
                else:
                    levels = _as_levels(kind)
                    bad = sorted(set(v for v in as_str if v is not None) - set(levels))
                    if bad:
                        raise DataError(f"column {name!r} has values outside its levels: {bad}")
                cols[name] = pd.Series(pd.Categorical(as_str, categories=levels))
                kinds[name] = CATEGORICAL
        for name in schema:
            if name not in frame.columns:
                raise DataError(f"missing column {name!r}")
        self._frame = pd.DataFrame(cols)
        self._kinds = kinds
        self.n_dropped = n_dropped

    @classmethod
    def from_columns(cls, schema=None, **columns):
        return cls(pd.DataFrame(columns), schema)

    @property
    def frame(self):
        return self._frame.copy()

    @property
    def columns(self):
        return list(self._frame.columns)

    @property
    def n_rows(self):
        return len(self._frame)

    def __len__(self):
        return self.n_rows

    def __contains__(self, name):
        return name in self._kinds

    def kind(self, name):
        try:
            return self._kinds[name]
        except KeyError:
            raise DataError(f"missing column {name!r}") from None

    @property
    def kinds(self):
        return dict(self._kinds)

    def levels(self, name):
        if self.kind(name) != CATEGORICAL:
            raise DataError(f"column {name!r} is numeric, not categorical")
        return list(self._frame[name].cat.categories)

    def schema(self):
        return {n: (self.levels(n) if k == CATEGORICAL else NUMERIC) for n, k in self._kinds.items()}

    def numeric(self, name):
        if self.kind(name) != NUMERIC:
            raise DataError(f"column {name!r} is categorical, not numeric")
        return self._frame[name].to_numpy(dtype=float, copy=True)

    def codes(self, name, levels=None):
        """Integer codes of a categorical column, optionally against other ``levels``.

        Values absent from ``levels`` get code -1.
        """
        col = self._frame[name]
        if self.kind(name) != CATEGORICAL:
            raise DataError(f"column {name!r} is numeric, not categorical")
        if levels is None:
            return col.cat.codes.to_numpy(dtype=np.int64)
        lookup = {lv: i for i, lv in enumerate(_as_levels(levels))}
        return np.array([lookup.get(v, -1) for v in col.astype(str)], dtype=np.int64)

    def values(self, name):
        if self.kind(name) == NUMERIC:
            return self.numeric(name)
        return self._frame[name].astype(str).to_numpy()

    def with_column(self, name, values, kind=None):
        frame = self._frame.copy()
        frame[name] = values
        schema = self.schema()
        if kind is not None:
            schema[name] = kind
        else:
            schema.pop(name, None)
        return Dataset(frame, schema)

    def select(self, names):
        return Dataset(self._frame[list(names)], {n: self.schema()[n] for n in names})

    def take(self, idx):
        frame = self._frame.iloc[np.asarray(idx)].reset_index(drop=True)
        return Dataset(frame, self.schema())

    def fingerprint(self):
        """SHA-256 over column names, kinds, levels and values."""
        h = hashlib.sha256()
        for name in self.columns:
            h.update(name.encode())
            h.update(repr(self.schema()[name]).encode())
            h.update(np.ascontiguousarray(self.values(name)).astype(str).tobytes()
                     if self.kind(name) == CATEGORICAL else self.numeric(name).tobytes())
        return h.hexdigest()

    def to_csv(self, path):
        self._frame.to_csv(path, index=False)

    def __repr__(self):
        kinds = ", ".join(f"{n}:{k[0]}" for n, k in self._kinds.items())
        return f"Dataset(n_rows={self.n_rows}, columns=[{kinds}])"


def load_csv(path, schema=None, usecols=None):
    """Read a UTF-8 CSV into a :class:`Dataset`.

    Rows with a missing value in any schema column are dropped with a single
    :class:`MissingRowsWarning` giving the count; the count is also kept on
    ``Dataset.n_dropped``. With ``usecols`` only those columns are read and
    all of them are checked for missing values.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    schema = dict(schema or {})
    wanted = list(dict.fromkeys(list(usecols or ()) + list(schema)))
    missing = [c for c in wanted if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    if usecols is not None:
        frame = frame[wanted]
        checked = wanted
    else:
        checked = list(schema) if schema else list(frame.columns)
    blank = frame[checked].apply(lambda c: c.str.strip().isin(["", "NA", "NaN", "nan"]))
    drop = blank.any(axis=1).to_numpy()
    n_dropped = int(drop.sum())
    if n_dropped:
        warnings.warn(f"{path}: dropped {n_dropped} row(s) with missing values", MissingRowsWarning,
                      stacklevel=2)
    kept = frame.loc[~drop].reset_index(drop=True)
    for name in kept.columns:
        kind = schema.get(name)
        if kind == NUMERIC or (kind is None and _looks_numeric(kept[name])):
            conv = pd.to_numeric(kept[name].str.strip(), errors="coerce")
            bad = conv.isna() & kept[name].str.strip().ne("")
            if bad.any():
                row = int(np.flatnonzero(bad.to_numpy())[0])
                # +2: one for the header, one for 1-based numbering
                file_row = int(np.flatnonzero(~drop)[row]) + 2
                raise DataError(f"{path}: row {file_row}, column {name!r}: "
                                f"cannot parse {kept[name].iloc[row]!r} as a number")
            kept[name] = conv
            schema.setdefault(name, NUMERIC)
        elif kind is None:
            schema[name] = CATEGORICAL
    return Dataset(kept, schema, n_dropped=n_dropped)


def _looks_numeric(col):
    vals = col.str.strip()
    vals = vals[vals.ne("")]
    return len(vals) > 0 and pd.to_numeric(vals, errors="coerce").notna().all()


@dataclass(frozen=True)
class PoststratTable:
    """Population counts ``N_k`` per combination of adjustment-variable levels."""

    adjustment_vars: tuple[str, ...]
    cells: tuple[tuple[str, ...], ...]
    counts: np.ndarray
    levels: dict = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "adjustment_vars", tuple(self.adjustment_vars))
        cells = tuple(tuple(str(v) for v in c) for c in self.cells)
        object.__setattr__(self, "cells", cells)
        counts = np.array(self.counts, dtype=float)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        if counts.shape != (len(cells),):
            raise DataError(f"{len(cells)} cells but {counts.shape} counts")
        if any(len(c) != len(self.adjustment_vars) for c in cells):
            raise DataError("every cell needs one level per adjustment variable")
        if len(set(cells)) != len(cells):
            raise DataError("duplicate cells in poststratification table")
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise DataError("cell counts must be finite and nonnegative")
        if not counts.sum() > 0:
            raise DataError("poststratification table has zero total count")
        if self.levels is None:
            levels = {v: list(dict.fromkeys(c[j] for c in cells))
                      for j, v in enumerate(self.adjustment_vars)}
            object.__setattr__(self, "levels", levels)

    def __eq__(self, other):
        if not isinstance(other, PoststratTable):
            return NotImplemented
        return (self.adjustment_vars == other.adjustment_vars and self.cells == other.cells
                and np.array_equal(self.counts, other.counts))

    __hash__ = None

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def total(self):
        return float(self.counts.sum())

    def column(self, name):
        j = self.adjustment_vars.index(name)
        return [c[j] for c in self.cells]

    def to_frame(self):
        df = pd.DataFrame(list(self.cells), columns=list(self.adjustment_vars))
        df["N"] = self.counts
        return df

    def to_dataset(self):
        """Cells as a categorical :class:`Dataset` (one row per cell)."""
        df = pd.DataFrame(list(self.cells), columns=list(self.adjustment_vars))
        return Dataset(df, {v: self.levels[v] for v in self.adjustment_vars})

    def mask(self, subset):
        """Boolean cell mask for ``{var: level or [levels]}``."""
        keep = np.ones(self.n_cells, dtype=bool)
        for var, want in (subset or {}).items():
            if var not in self.adjustment_vars:
                raise DataError(f"subset variable {var!r} not in table")
            want = {str(w) for w in (want if isinstance(want, (list, tuple, set)) else [want])}
            keep &= np.array([lv in want for lv in self.column(var)])
        return keep

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_frame(cls, frame, count_col="N"):
        if count_col not in frame.columns:
            raise DataError(f"poststratification table needs a {count_col!r} column")
        adj = [c for c in frame.columns if c != count_col]
        cells = [tuple(str(v) for v in row) for row in frame[adj].itertuples(index=False)]
        counts = pd.to_numeric(frame[count_col], errors="raise").to_numpy(dtype=float)
        return cls(tuple(adj), tuple(cells), counts)

    @classmethod
    def from_csv(cls, path, count_col="N"):
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        frame[count_col] = frame[count_col].str.replace(",", "").str.replace(" ", "")
        return cls.from_frame(frame, count_col)


def build_poststrat_table(reference, adjustment_vars, weight_col=None):
    """Sum weights (or count rows) of ``reference`` in every level combination.

    All combinations of declared levels are present; empty ones get ``N = 0``.
    """
    reference = reference if isinstance(reference, Dataset) else Dataset(reference)
    if reference.n_rows == 0:
        raise DataError("reference data is empty")
    adjustment_vars = list(adjustment_vars)
    for v in adjustment_vars:
        if reference.kind(v) != CATEGORICAL:
            raise DataError(f"adjustment variable {v!r} must be categorical")
    if weight_col is None:
        w = np.ones(reference.n_rows)
    else:
        w = reference.numeric(weight_col)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DataError(f"weight column {weight_col!r} has negative or non-finite values")
    levels = [reference.levels(v) for v in adjustment_vars]
    codes = [reference.codes(v) for v in adjustment_vars]
    shape = tuple(len(lv) for lv in levels)
    flat = np.ravel_multi_index(codes, shape) if adjustment_vars else np.zeros(reference.n_rows, int)
    counts = np.bincount(flat, weights=w, minlength=int(np.prod(shape)))
    cells = tuple(itertools.product(*levels))
    return PoststratTable(tuple(adjustment_vars), cells, counts,
                          levels=dict(zip(adjustment_vars, levels)))


@dataclass
class AlignmentReport:
    """Mismatches between a model, its training sample and a target table.

    ``missing_vars`` and ``unknown_sample_levels`` are fatal for prediction;
    ``unseen_levels`` (table levels the sample never observed) are handled by
    drawing fresh group effects.
    """

    missing_vars: list = field(default_factory=list)
    unseen_levels: dict = field(default_factory=dict)
    unknown_sample_levels: dict = field(default_factory=dict)

    @property
    def fatal(self):
        return bool(self.missing_vars or self.unknown_sample_levels)

    @property
    def empty(self):
        return not (self.missing_vars or self.unseen_levels or self.unknown_sample_levels)

    def raise_if_fatal(self):
        if self.fatal:
            parts = []
            if self.missing_vars:
                parts.append(f"table lacks model variables {self.missing_vars}")
            if self.unknown_sample_levels:
                parts.append(f"sample levels absent from table {self.unknown_sample_levels}")
            raise DataError("; ".join(parts))


def validate_alignment(spec, sample, table, exclude=()):
    """Compare the categorical predictors of ``spec`` across sample and table.

    Columns in ``exclude`` (e.g. a treatment indicator supplied separately) are
    not required in the table.
    """
    report = AlignmentReport()
    needed = [c for c in spec.predictors if c not in exclude]
    report.missing_vars = [c for c in needed if c not in table.adjustment_vars]
    for var in needed:
        if var not in table.adjustment_vars or var not in sample:
            continue
        if sample.kind(var) != CATEGORICAL:
            continue
        observed = set(np.asarray(sample.values(var)))
        tab_levels = list(dict.fromkeys(table.column(var)))
        unseen = [lv for lv in tab_levels if lv not in observed]
        if unseen:
            report.unseen_levels[var] = unseen
        unknown = sorted(observed - set(tab_levels))
        if unknown:
            report.unknown_sample_levels[var] = unknown
    return report
