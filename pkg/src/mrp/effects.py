"""Two-stage pre/post treatment models and transport of their effects.

The post-score model conditions on the pre-score, so predicting a target
population chains two posteriors. For each posterior draw, a pre-score is
simulated for every target individual. The post-score is then predicted
under both arms from that same pre-score. Pairing the arms this way keeps
pre-score noise out of the contrast.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import CATEGORICAL, DataError, Dataset, PoststratTable
from .dist import truncnorm_mean, truncnorm_sample
from .formula import parse_formula
from .model import build_design
from .poststrat import (_select_draws, linear_predictor_draws, model_alignment, sample_population,
                        summarize, table_to_dataset)
from .sampler import SamplerConfig, sample_posterior

__all__ = [
    "TwoStageModel",
    "EffectEstimate",
    "fit_two_stage",
    "transport_effect",
    "predict_replication",
    "raw_arm_differences",
    "ROSTER_LIMIT",
]

ROSTER_LIMIT = 50_000  # largest table expanded cell-by-cell into a roster


@dataclass
class TwoStageModel:
    pre_fit: object
    post_fit: object
    treatment: str = "Z"

    @property
    def pre(self):
        return self.pre_fit.spec.outcome

    @property
    def post(self):
        return self.post_fit.spec.outcome

    @property
    def adjustment_vars(self):
        return list(self.post_fit.spec.groups)


@dataclass
class EffectEstimate:
    """Per-draw population means of post minus pre in each arm."""

    treated: np.ndarray
    control: np.ndarray

    @property
    def contrast(self):
        return self.treated - self.control

    def summary(self):
        return {
            "treated": summarize(self.treated),
            "control": summarize(self.control),
            "contrast": summarize(self.contrast),
        }


def _check_binary(data, col):
    if col not in data:
        raise DataError(f"missing treatment column {col!r}")
    if data.kind(col) == CATEGORICAL:
        raise DataError(f"treatment column {col!r} must be numeric 0/1")
    z = data.numeric(col)
    bad = sorted(set(np.unique(z)) - {0.0, 1.0})
    if bad:
        raise DataError(f"treatment column {col!r} must be 0/1; found {bad}")


def _derived_seed(seed, stream):
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1)[0])


def fit_two_stage(pre_spec, post_spec, data, priors=None, config=None, treatment="Z"):
    """Fit the pre-score model and the post-score model on the same sample.

    Parameters
    ----------
    pre_spec, post_spec : ModelSpec or str
        The post-score model must use the pre-score outcome as a constant
        effect and share the pre model's grouping factors.
    data : Dataset
    priors : tuple of (PriorSet or None, PriorSet or None), optional
    config : SamplerConfig, optional
        Each fit gets its own seed derived from ``config.seed``.
    treatment : str
        0/1 treatment column.
    """
    pre_spec = parse_formula(pre_spec) if isinstance(pre_spec, str) else pre_spec
    post_spec = parse_formula(post_spec) if isinstance(post_spec, str) else post_spec
    data = data if isinstance(data, Dataset) else Dataset(data)
    for col in (pre_spec.outcome, post_spec.outcome):
        if col not in data:
            raise DataError(f"missing column {col!r}")
    _check_binary(data, treatment)
    if pre_spec.outcome not in post_spec.fixed_terms:
        raise ValueError(f"post model must include the pre-score {pre_spec.outcome!r} as a constant effect")
    if set(pre_spec.groups) != set(post_spec.groups):
        raise ValueError(f"pre and post models must share grouping factors: "
                         f"{sorted(pre_spec.groups)} vs {sorted(post_spec.groups)}")
    if treatment in pre_spec.predictors:
        raise ValueError("the pre-score model cannot depend on treatment")
    config = config or SamplerConfig()
    pre_priors, post_priors = priors if priors is not None else (None, None)
    pre_fit = sample_posterior(pre_spec, data, pre_priors,
                               replace(config, seed=_derived_seed(config.seed, 0)))
    post_fit = sample_posterior(post_spec, data, post_priors,
                                replace(config, seed=_derived_seed(config.seed, 1)))
    pre_fit.manifest["two_stage"] = {"role": "pre", "partner": str(post_spec),
                                     "base_seed": config.seed}
    post_fit.manifest["two_stage"] = {"role": "post", "partner": str(pre_spec),
                                      "base_seed": config.seed}
    return TwoStageModel(pre_fit, post_fit, treatment)


def _roster(model, target, rng, roster_size):
    if isinstance(target, PoststratTable):
        info = model.post_fit.info
        exclude = (model.pre, model.treatment)
        for fit in (model.pre_fit, model.post_fit):
            model_alignment(fit.info, target, exclude).raise_if_fatal()
        counts = target.counts
        exact = np.all(counts == np.round(counts)) and target.total <= ROSTER_LIMIT
        if exact:
            cells = table_to_dataset(target, info)
            return cells.take(np.repeat(np.arange(target.n_cells), counts.astype(int)))
        return sample_population(target, roster_size, seed=rng.integers(2**63))
    target = target if isinstance(target, Dataset) else Dataset(target)
    for col in model.adjustment_vars:
        if col not in target:
            raise DataError(f"target lacks adjustment variable {col!r}")
    return target


def _arm_mean(fit, roster, pre, z, treatment, pre_col, rows, seed, mode, u):
    """Population mean of (post - pre) under arm ``z`` for each selected draw."""
    st_all = fit.structured(rows)
    lb, ub = fit.spec.bounds
    out = np.empty(len(rows))
    base = roster.with_column(treatment, np.full(roster.n_rows, float(z)), kind="numeric")
    for d in range(len(rows)):
        data = base.with_column(pre_col, pre[d], kind="numeric")
        design = build_design(fit.spec, data, info=fit.info)
        st = {"beta": st_all["beta"][d:d + 1], "sd": [s[d:d + 1] for s in st_all["sd"]],
              "r": [r[d:d + 1] for r in st_all["r"]], "sigma": st_all["sigma"][d:d + 1]}
        # the same seed in both arms gives identical draws for unseen groups
        eta = linear_predictor_draws(st, design, data, np.random.default_rng(seed[d]))[0]
        sigma = float(st["sigma"][0])
        if mode == "expectation":
            post = truncnorm_mean(eta, sigma, lb, ub)
        else:
            post = truncnorm_sample(eta, sigma, lb, ub, u=u[d])
        out[d] = np.mean(post - pre[d])
    return out


def transport_effect(model, target, n_draws=20, seed=None, use_observed_pre=False,
                     mode="expectation", roster_size=10_000):
    """Per-arm population differences (post - pre) for a target population.

    Parameters
    ----------
    model : TwoStageModel
    target : PoststratTable or Dataset
        A table with integer counts totalling at most ``ROSTER_LIMIT`` is
        expanded to one row per person; larger tables are sampled to
        ``roster_size`` people in proportion to their counts.
    n_draws : int or None
        Posterior draws used, each giving one simulated pre-score per person.
        ``None`` uses every draw of the smaller fit.
    use_observed_pre : bool
        Use the target's own pre-scores instead of simulating them.
    mode : {"expectation", "predictive"}
        Expected post-score given the pre-score, or a simulated one that
        shares its random number across arms.
    """
    if mode not in ("expectation", "predictive"):
        raise ValueError(f"mode must be 'expectation' or 'predictive', got {mode!r}")
    rng = np.random.default_rng(seed)
    if n_draws is None:
        n_draws = min(model.pre_fit.n_total, model.post_fit.n_total)
    roster = _roster(model, target, rng, roster_size)
    if roster.n_rows == 0:
        raise DataError("target population is empty")
    pre_rows = _select_draws(model.pre_fit, n_draws, rng)
    post_rows = _select_draws(model.post_fit, n_draws, rng)
    n = roster.n_rows

    if use_observed_pre:
        if model.pre not in roster:
            raise DataError(f"target has no observed pre-score column {model.pre!r}")
        pre = np.broadcast_to(roster.numeric(model.pre), (n_draws, n))
    else:
        pre_fit = model.pre_fit
        design = build_design(pre_fit.spec, roster, info=pre_fit.info)
        st = pre_fit.structured(pre_rows)
        eta = linear_predictor_draws(st, design, roster, rng)
        lb, ub = pre_fit.spec.bounds
        pre = truncnorm_sample(eta, st["sigma"][:, None], lb, ub, rng=rng)

    seeds = rng.integers(2**63, size=n_draws)
    u = rng.random((n_draws, n)) if mode == "predictive" else None
    args = (model.treatment, model.pre, post_rows, seeds, mode, u)
    treated = _arm_mean(model.post_fit, roster, pre, 1, *args)
    control = _arm_mean(model.post_fit, roster, pre, 0, *args)
    return EffectEstimate(treated, control)


def predict_replication(model, sample2, n_draws=20, seed=None, mode="expectation"):
    """What the model expects a second sample to show, treating it as the population."""
    return transport_effect(model, sample2, n_draws=n_draws, seed=seed, mode=mode)


def raw_arm_differences(data, pre, post, treatment="Z"):
    """Observed mean (post - pre) in each arm of a sample."""
    data = data if isinstance(data, Dataset) else Dataset(data)
    _check_binary(data, treatment)
    z = data.numeric(treatment)
    diff = data.numeric(post) - data.numeric(pre)
    if not (z == 1).any() or not (z == 0).any():
        raise DataError("both arms need at least one observation")
    treated = float(diff[z == 1].mean())
    control = float(diff[z == 0].mean())
    return {"treated": treated, "control": control, "contrast": treated - control}
