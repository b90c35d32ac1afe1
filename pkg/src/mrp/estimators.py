"""scikit-learn style wrappers around fitting, prediction and poststratification."""
from __future__ import annotations

from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .effects import fit_two_stage, predict_replication, transport_effect
from .formula import parse_formula
from .model import default_priors
from .poststrat import aggregate, posterior_predict, predict_cells
from .sampler import SamplerConfig, prior_predictive, sample_posterior
from .validation import check_count, check_dataset, check_probability, check_seed

__all__ = ["MRPRegressor", "TwoStageEffectModel"]


def _config(est):
    return SamplerConfig(
        chains=check_count(est.chains, "chains"),
        warmup=check_count(est.warmup, "warmup"),
        draws=check_count(est.draws, "draws"),
        seed=check_seed(est.seed),
        target_accept=check_probability(est.target_accept, "target_accept"),
        max_treedepth=check_count(est.max_treedepth, "max_treedepth"),
        n_jobs=check_count(est.n_jobs, "n_jobs"),
        metric=est.metric,
    )


class MRPRegressor(RegressorMixin, BaseEstimator):
    """Multilevel regression fit by NUTS, with poststratification.

    Parameters
    ----------
    formula : str
        Model formula, e.g. ``"O | trunc(lb=10, ub=50) ~ female + (1|age_group)"``.
    priors : PriorSet, optional
        Defaults are scaled to the outcome.
    chains, warmup, draws, seed, target_accept, max_treedepth, n_jobs, metric
        Sampler settings; see :class:`mrp.sampler.SamplerConfig`.

    Attributes
    ----------
    spec_ : ModelSpec
    draws_ : PosteriorDraws
    diagnostics_ : DiagnosticReport
    """

    def __init__(self, formula, priors=None, chains=4, warmup=1000, draws=1000, seed=0,
                 target_accept=0.99, max_treedepth=10, n_jobs=1, metric="diag"):
        self.formula = formula
        self.priors = priors
        self.chains = chains
        self.warmup = warmup
        self.draws = draws
        self.seed = seed
        self.target_accept = target_accept
        self.max_treedepth = max_treedepth
        self.n_jobs = n_jobs
        self.metric = metric

    def fit(self, X, y=None):
        """Sample the posterior. ``y``, if given, becomes the outcome column."""
        spec = parse_formula(self.formula)
        data = check_dataset(X)
        if y is not None:
            data = data.with_column(spec.outcome, y, kind="numeric")
        self.spec_ = spec
        self.draws_ = sample_posterior(spec, data, self.priors, _config(self))
        self.diagnostics_ = self.draws_.diagnostics()
        return self

    def predict(self, X):
        """Posterior mean of each row's expected outcome."""
        check_is_fitted(self, "draws_")
        mean = posterior_predict(self.draws_, check_dataset(X), None, seed=self.seed,
                                 expectation=True)
        return mean.mean(axis=0)

    def posterior_predict(self, X, n_draws=None, seed=None):
        """Simulated outcomes, one row per posterior draw used."""
        check_is_fitted(self, "draws_")
        return posterior_predict(self.draws_, check_dataset(X), n_draws,
                                 seed=self.seed if seed is None else seed)

    def predict_cells(self, table, mode="expectation", seed=None, extra=None):
        check_is_fitted(self, "draws_")
        return predict_cells(self.draws_, table, mode, self.seed if seed is None else seed,
                             extra=extra)

    def poststratify(self, table, subset=None, mode="expectation", seed=None, extra=None):
        """Population (or subpopulation) estimate over a poststratification table."""
        cells = self.predict_cells(table, mode, seed, extra)
        return aggregate(cells, subset, "theta" if mode == "expectation" else "predictive")

    def prior_predictive(self, X, n_draws=500, seed=None):
        spec = parse_formula(self.formula)
        data = check_dataset(X)
        priors = self.priors
        if priors is None:
            priors = default_priors(spec, data)
        return prior_predictive(spec, priors, data, n_draws, self.seed if seed is None else seed)


class TwoStageEffectModel(BaseEstimator):
    """Pre- and post-score models whose effects can be transported to a target.

    Parameters
    ----------
    pre_formula, post_formula : str
    treatment : str
        Name of the 0/1 assignment column.
    pre_priors, post_priors : PriorSet, optional
    chains, warmup, draws, seed, target_accept, max_treedepth, n_jobs, metric
        Sampler settings shared by both fits.
    """

    def __init__(self, pre_formula, post_formula, treatment="Z", pre_priors=None,
                 post_priors=None, chains=4, warmup=1000, draws=1000, seed=0,
                 target_accept=0.99, max_treedepth=10, n_jobs=1, metric="diag"):
        self.pre_formula = pre_formula
        self.post_formula = post_formula
        self.treatment = treatment
        self.pre_priors = pre_priors
        self.post_priors = post_priors
        self.chains = chains
        self.warmup = warmup
        self.draws = draws
        self.seed = seed
        self.target_accept = target_accept
        self.max_treedepth = max_treedepth
        self.n_jobs = n_jobs
        self.metric = metric

    def fit(self, X, y=None):
        self.model_ = fit_two_stage(self.pre_formula, self.post_formula, check_dataset(X),
                                    (self.pre_priors, self.post_priors), _config(self),
                                    self.treatment)
        return self

    def transport(self, target, n_draws=20, seed=None, **kwargs):
        check_is_fitted(self, "model_")
        return transport_effect(self.model_, target, n_draws,
                                self.seed if seed is None else seed, **kwargs)

    def predict_replication(self, sample2, n_draws=20, seed=None):
        check_is_fitted(self, "model_")
        return predict_replication(self.model_, check_dataset(sample2), n_draws,
                                   self.seed if seed is None else seed)
