"""Cell predictions from posterior draws and count-weighted aggregation.

For an unseen group level (present in the table or new data, absent when the
model was fit) each posterior draw gets a fresh effect from
``Normal(0, sd)`` using that draw's group scale. This is the model's own
prediction for a new group and deliberately widens intervals for such cells.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import CATEGORICAL, NUMERIC, AlignmentReport, DataError, Dataset, PoststratTable
from .dist import truncnorm_mean, truncnorm_sample
from .model import build_design

__all__ = [
    "CellPredictions",
    "PopulationEstimate",
    "predict_cells",
    "aggregate",
    "sample_population",
    "posterior_predict",
    "linear_predictor_draws",
    "model_alignment",
    "table_to_dataset",
    "summarize",
]


def summarize(x, probs=(0.025, 0.1, 0.25, 0.5, 0.75, 0.9, 0.975)):
    """Mean, sd and quantiles of a vector of draws."""
    x = np.asarray(x, dtype=float)
    out = {"mean": float(x.mean()), "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
           "n_draws": int(x.size)}
    out["quantiles"] = {f"{p:g}": float(q) for p, q in zip(probs, np.quantile(x, probs))}
    return out


@dataclass
class CellPredictions:
    table: PoststratTable
    theta: np.ndarray  # draws x cells, expected outcome per cell
    predictive: np.ndarray | None = None  # draws x cells, simulated outcomes

    def __post_init__(self):
        if self.theta.shape[1] != self.table.n_cells:
            raise ValueError("theta columns must align with table cells")

    def to_frame(self):
        df = self.table.to_frame()
        df["theta_mean"] = self.theta.mean(axis=0)
        df["theta_sd"] = self.theta.std(axis=0, ddof=1) if self.theta.shape[0] > 1 else 0.0
        return df


@dataclass
class PopulationEstimate:
    theta_pop: np.ndarray  # one poststratified value per draw

    @property
    def summary(self):
        return summarize(self.theta_pop)

    @property
    def mean(self):
        return float(np.mean(self.theta_pop))

    @property
    def sd(self):
        return float(np.std(self.theta_pop, ddof=1)) if self.theta_pop.size > 1 else 0.0

    def interval(self, level=0.95):
        a = (1 - level) / 2
        return tuple(float(v) for v in np.quantile(self.theta_pop, [a, 1 - a]))


def model_alignment(info, table, exclude=()):
    """Alignment report of a table against the levels a fitted model knows."""
    spec = info.spec
    known = {t.group: set(lv) for t, lv in zip(spec.varying_terms, info.group_levels)}
    for col, lv in info.fixed_levels.items():
        known.setdefault(col, set()).update(lv)
    report = AlignmentReport()
    needed = [c for c in spec.predictors if c not in exclude]
    report.missing_vars = [c for c in needed if c not in table.adjustment_vars]
    for var, levels in known.items():
        if var in exclude or var not in table.adjustment_vars:
            continue
        tab = list(dict.fromkeys(table.column(var)))
        unseen = [lv for lv in tab if lv not in levels]
        if unseen:
            report.unseen_levels[var] = unseen
        unknown = sorted(levels - set(tab))
        if unknown:
            report.unknown_sample_levels[var] = unknown
    return report


def _numeric_columns(info):
    spec = info.spec
    cols = {c.source for c in info.fixed if c.source is not None and c.level is None}
    for t in spec.varying_terms:
        cols.update(t.slopes)
    return cols


def table_to_dataset(table, info, extra=None):
    """One row per cell, typed as the model expects; ``extra`` fills columns absent from the table."""
    frame = pd.DataFrame(list(table.cells), columns=list(table.adjustment_vars))
    numeric = _numeric_columns(info)
    schema = {}
    for col in frame.columns:
        if col in numeric:
            try:
                frame[col] = frame[col].astype(float)
            except ValueError:
                raise DataError(f"table column {col!r} must hold numeric levels") from None
            schema[col] = NUMERIC
        else:
            schema[col] = table.levels[col] if table.levels else CATEGORICAL
    for col, val in (extra or {}).items():
        frame[col] = val
        schema[col] = NUMERIC if col in numeric else CATEGORICAL
    return Dataset(frame, schema)


def linear_predictor_draws(structured, design, newdata, rng):
    """Linear predictor ``(draws, rows)`` for encoded ``design`` of ``newdata``.

    ``structured`` is :meth:`DesignInfo.split` output for the draws in use.
    Rows whose group level is unknown to the model get a fresh effect per draw.
    """
    beta = np.atleast_2d(structured["beta"])
    n_draws = beta.shape[0]
    eta = beta @ design.fixed.T
    for t, idx, S, r, sd in zip(design.info.spec.varying_terms, design.group_index,
                                design.group_slopes, structured["r"], structured["sd"]):
        r = r.reshape((n_draws,) + r.shape[-2:])
        sd = sd.reshape(n_draws, -1)
        known = idx >= 0
        if known.all():
            eta += np.einsum("dij,ij->di", r[:, idx, :], S)
            continue
        if known.any():
            eta[:, known] += np.einsum("dij,ij->di", r[:, idx[known], :], S[known])
        new_levels, inv = np.unique(newdata.values(t.group)[~known], return_inverse=True)
        fresh = rng.standard_normal((n_draws, len(new_levels), sd.shape[1])) * sd[:, None, :]
        eta[:, ~known] += np.einsum("dij,ij->di", fresh[:, inv, :], S[~known])
    return eta


def _select_draws(draws, n_draws, rng, replace=False):
    total = draws.n_total
    if n_draws is None:
        return np.arange(total)
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    if not replace and n_draws > total:
        raise ValueError(f"requested {n_draws} draws but the fit has only {total}")
    return np.sort(rng.choice(total, size=n_draws, replace=replace))


def _as_model_types(newdata, info):
    """Cast columns to the kinds the model expects: numbers for predictors, labels for groups."""
    for col in _numeric_columns(info):
        if col in newdata and newdata.kind(col) == CATEGORICAL:
            try:
                values = newdata.values(col).astype(float)
            except ValueError:
                raise DataError(f"column {col!r} must be numeric") from None
            newdata = newdata.with_column(col, values, kind=NUMERIC)
    for t in info.spec.varying_terms:
        col = t.group
        if col in newdata and newdata.kind(col) == NUMERIC:
            newdata = newdata.with_column(col, _level_strings(newdata.numeric(col)), kind=CATEGORICAL)
    return newdata


def _level_strings(values):
    # 3.0 -> "3" so numeric codes match levels read from CSV text
    return np.array([str(int(v)) if float(v).is_integer() else repr(float(v)) for v in values],
                    dtype=object)


def _predict(draws, newdata, rng, rows, predictive):
    newdata = _as_model_types(newdata, draws.info)
    design = build_design(draws.spec, newdata, info=draws.info)
    st = draws.structured(rows)
    eta = linear_predictor_draws(st, design, newdata, rng)
    sigma = np.asarray(st["sigma"], dtype=float)[:, None]
    lb, ub = draws.spec.bounds
    mean = truncnorm_mean(eta, sigma, lb, ub)
    sim = truncnorm_sample(eta, sigma, lb, ub, rng=rng) if predictive else None
    return mean, sim


def predict_cells(draws, table, mode="expectation", seed=None, n_draws=None, extra=None):
    """Per-draw expected outcome for every table cell.

    Parameters
    ----------
    draws : PosteriorDraws
    table : PoststratTable
    mode : {"expectation", "predictive"}
        ``"predictive"`` also simulates one outcome per draw and cell.
    seed : int, optional
        Used for unseen-level effects, draw subsetting and outcome noise.
    n_draws : int, optional
        Use a random subset of this many posterior draws (all by default).
    extra : dict, optional
        Constant values for model columns that the table does not carry,
        e.g. ``{"Z": 1.0}``.
    """
    if mode not in ("expectation", "predictive"):
        raise ValueError(f"mode must be 'expectation' or 'predictive', got {mode!r}")
    model_alignment(draws.info, table, exclude=tuple(extra or ())).raise_if_fatal()
    rng = np.random.default_rng(seed)
    rows = _select_draws(draws, n_draws, rng)
    newdata = table_to_dataset(table, draws.info, extra)
    mean, sim = _predict(draws, newdata, rng, rows, mode == "predictive")
    return CellPredictions(table, mean, sim)


def aggregate(cells, subset=None, source="theta"):
    """Poststratify: per draw, ``sum(N_k theta_k) / sum(N_k)`` over the (sub)population.

    ``subset`` is ``{variable: level or [levels]}``; ``source`` picks
    ``"theta"`` (expectations) or ``"predictive"`` (simulated outcomes).
    """
    values = cells.theta if source == "theta" else cells.predictive
    if values is None:
        raise ValueError("cell predictions carry no predictive draws; use mode='predictive'")
    mask = cells.table.mask(subset)
    if not mask.any():
        raise DataError(f"subset {subset} selects no cells")
    w = cells.table.counts[mask]
    if not w.sum() > 0:
        raise DataError(f"subset {subset} has zero population count")
    return PopulationEstimate(values[:, mask] @ w / w.sum())


def sample_population(table, n, seed=None):
    """Draw ``n`` individuals with cell probabilities ``N_k / sum(N)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    cells = rng.choice(table.n_cells, size=n, p=table.counts / table.total)
    frame = pd.DataFrame([table.cells[k] for k in cells], columns=list(table.adjustment_vars))
    return Dataset(frame, {v: table.levels[v] for v in table.adjustment_vars})


def posterior_predict(draws, newdata, n_draws, seed=None, replace=False, expectation=False):
    """Simulated outcomes ``(n_draws, rows)``, one distinct posterior draw per row.

    With ``expectation=True`` the truncated-normal means are returned instead.
    """
    if not isinstance(newdata, Dataset):
        newdata = Dataset(newdata)
    rng = np.random.default_rng(seed)
    rows = _select_draws(draws, n_draws, rng, replace)
    mean, sim = _predict(draws, newdata, rng, rows, not expectation)
    return mean if expectation else sim
