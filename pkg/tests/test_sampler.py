import math

import numpy as np
import pandas as pd
import pytest

from conftest import AGES, OPENNESS, fit_quietly, quick_config
from mrp.data import Dataset
from mrp.dist import Constant, HalfStudentT, Normal
from mrp.model import PriorSet, default_priors
from mrp.sampler import (ConvergenceWarning, PosteriorDraws, SamplerConfig, ess, ess_bulk,
                         mcse_mean, prior_predictive, sample_posterior, split_rhat)
from mrp.sampler.nuts import NUTS, DualAveraging, WindowedAdaptation, _Welford


# -- diagnostics -----------------------------------------------------------------

def test_rhat_iid_chains():
    x = np.random.default_rng(0).standard_normal((4, 1000))
    assert 0.999 <= split_rhat(x) <= 1.01


def test_rhat_non_mixing_chains():
    rng = np.random.default_rng(1)
    x = np.vstack([rng.normal(-10, 1, 1000), rng.normal(10, 1, 1000)])
    assert split_rhat(x) > 1.5


def test_rhat_detects_within_chain_trend():
    x = np.linspace(0, 10, 2000)[None, :] + np.random.default_rng(2).standard_normal((1, 2000))
    assert split_rhat(x) > 1.1


def _ar1(phi, n, rng):
    e = rng.standard_normal(n) * math.sqrt(1 - phi**2)
    x = np.empty(n)
    x[0] = rng.standard_normal()
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    return x


def test_ess_of_ar1_chain():
    n, phi = 20_000, 0.9
    x = _ar1(phi, n, np.random.default_rng(3))[None, :]
    expected = n * (1 - phi) / (1 + phi)
    assert abs(ess(x, method="mean") / expected - 1) < 0.25
    assert abs(ess_bulk(x) / expected - 1) < 0.25


def test_ess_iid_close_to_n():
    x = np.random.default_rng(4).standard_normal((4, 1000))
    assert 3000 < ess_bulk(x) < 5000


def test_constant_chains():
    x = np.ones((2, 10))
    assert split_rhat(x) == 1.0 and ess_bulk(x) == 20.0


def test_diagnostics_need_draws():
    with pytest.raises(ValueError):
        split_rhat(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="unknown ESS method"):
        ess(np.random.default_rng(0).standard_normal((2, 10)), method="tail")


def test_mcse_of_iid_mean():
    x = np.random.default_rng(5).standard_normal((4, 2500))
    assert mcse_mean(x) == pytest.approx(0.01, rel=0.15)


# -- kernel and adaptation -----------------------------------------------------

def test_nuts_on_standard_normal():
    lg = lambda x: (-0.5 * float(x @ x), -x)
    kern = NUTS(lg, 10, np.random.default_rng(0))
    kern.step_size = 0.5
    x = np.zeros(10)
    lp, g = lg(x)
    out = np.empty((3000, 10))
    for i in range(3000):
        x, lp, g, _ = kern.transition(x, lp, g)
        out[i] = x
    assert np.all(np.abs(out.mean(axis=0)) < 0.1)
    assert np.all(np.abs(out.var(axis=0) - 1) < 0.15)
    # NUTS is antithetic in moderate dimension: ESS above the draw count
    assert ess(out[:, 0][None, :], method="mean") > 3000


def test_dense_metric_on_correlated_gaussian():
    cov = np.array([[1.0, 0.99], [0.99, 1.0]])
    prec = np.linalg.inv(cov)
    lg = lambda x: (-0.5 * float(x @ prec @ x), -prec @ x)
    kern = NUTS(lg, 2, np.random.default_rng(0), metric="dense")
    kern.inv_metric = cov
    kern.step_size = 0.8
    x = np.zeros(2)
    lp, g = lg(x)
    out, n_leap = np.empty((4000, 2)), 0
    for i in range(4000):
        x, lp, g, st = kern.transition(x, lp, g)
        out[i] = x
        n_leap += st["n_leapfrog"]
    np.testing.assert_allclose(np.cov(out.T), cov, atol=0.08)
    # the metric whitens the target, so short trajectories suffice
    assert n_leap / 4000 < 6
    # momentum covariance is the metric's inverse
    p = np.array([kern.sample_momentum() for _ in range(20000)])
    np.testing.assert_allclose(np.cov(p.T), prec, rtol=0.1)


def test_dense_welford_shrinks_toward_identity():
    w = _Welford(2, dense=True)
    for v in np.random.default_rng(1).multivariate_normal([0, 0], [[1, 0.9], [0.9, 1]], 5000):
        w.add(v)
    est = w.variance()
    np.testing.assert_allclose(est, [[1, 0.9], [0.9, 1]], atol=0.05)
    np.testing.assert_allclose(est, est.T)
    with pytest.raises(ValueError, match="metric"):
        NUTS(lambda x: (0.0, x), 2, np.random.default_rng(0), metric="full")


def test_dense_fit_matches_diag(openness_data):
    diag = fit_quietly(OPENNESS, openness_data, config=quick_config(seed=3))
    dense = fit_quietly(OPENNESS, openness_data, config=quick_config(seed=3, metric="dense"))
    for name in ("b_female", "sigma"):
        a, b = diag.param(name), dense.param(name)
        assert abs(a.mean() - b.mean()) < 4 * np.hypot(mcse_mean(a), mcse_mean(b))
    assert dense.config.metric == "dense"


def test_divergence_on_huge_step():
    lg = lambda x: (-0.5 * float(x @ x) * 1e4, -1e4 * x)
    kern = NUTS(lg, 2, np.random.default_rng(0))
    kern.step_size = 10.0
    x = np.ones(2) * 0.01
    _, _, _, st = kern.transition(x, *lg(x))
    assert st["divergent"]


def test_dual_averaging_converges():
    # acceptance falls with step size and equals the 0.8 target at 0.25
    accept = lambda eps: 1.0 / (1.0 + 0.25 * (eps / 0.25) ** 2)
    da = DualAveraging(1.0, target=0.8)
    eps = 1.0
    for _ in range(2000):
        eps = da.update(accept(eps))
    assert da.final() == pytest.approx(0.25, rel=0.05)


def test_window_schedule():
    w = WindowedAdaptation(1000)
    closes = [it for it in range(1000) if w.window_closes(it)]
    assert closes[-1] == 1000 - 50 - 1
    assert w.in_slow_window(75) and not w.in_slow_window(74) and not w.in_slow_window(960)
    widths = np.diff([74] + closes)
    assert list(widths[:3]) == [25, 50, 100]


# -- posterior sampling ----------------------------------------------------------

def _conjugate(n=50, seed=0):
    y = np.random.default_rng(seed).normal(3.0, 2.0, n)
    return Dataset(pd.DataFrame({"y": y})), y


def test_conjugate_posterior():
    data, y = _conjugate()
    m0, s0, sigma = 0.0, 5.0, 2.0
    pr = PriorSet({"Intercept": Normal(m0, s0)}, {}, Constant(sigma))
    fit = sample_posterior("y ~ 1", data, pr,
                           SamplerConfig(chains=4, warmup=500, draws=2000, seed=11))
    prec = 1 / s0**2 + y.size / sigma**2
    mean = (m0 / s0**2 + y.sum() / sigma**2) / prec
    x = fit.param("b_Intercept")
    se = mcse_mean(x)
    assert abs(x.mean() - mean) < 3 * se
    # sd of the sample sd: about sd / sqrt(2 * ESS)
    assert abs(x.std() - prec**-0.5) < 3 * prec**-0.5 / math.sqrt(2 * ess(x, method="mean"))
    assert np.all(fit.param("sigma") == sigma)


def test_determinism_and_chain_independence(openness_data):
    cfg = quick_config(seed=1, chains=2, warmup=100, draws=50)
    a = fit_quietly(OPENNESS, openness_data, config=cfg)
    b = fit_quietly(OPENNESS, openness_data, config=cfg)
    assert np.array_equal(a.draws, b.draws)
    c = fit_quietly(OPENNESS, openness_data, config=quick_config(seed=2, chains=2, warmup=100, draws=50))
    assert not np.array_equal(a.draws, c.draws)


def test_parallel_chains_match_serial(openness_data):
    cfg = quick_config(seed=4, chains=2, warmup=50, draws=20)
    serial = fit_quietly(OPENNESS, openness_data, config=cfg)
    par = fit_quietly(OPENNESS, openness_data, config=SamplerConfig(**{**cfg.to_dict(), "n_jobs": 2}))
    assert np.array_equal(serial.draws, par.draws)


def test_fit_recovers_generating_female_effect(openness_fit):
    x = openness_fit.param("b_female")
    assert -4.5 < x.mean() < -1.0
    assert openness_fit.draws.shape == (2, 300, len(openness_fit.names))
    assert set(openness_fit.stats) >= {"accept_stat", "n_leapfrog", "treedepth", "divergent", "lp"}


def test_manifest(openness_fit, openness_data):
    m = openness_fit.manifest
    assert m["formula"] == "O | trunc(lb=10, ub=50) ~ female + (1|age_group)"
    assert m["data_sha256"] == openness_data.fingerprint()
    assert m["priors"] == default_priors(OPENNESS, openness_data).to_dict()
    assert m["sampler"]["seed"] == 1


def test_save_load_round_trip(openness_fit, tmp_path):
    openness_fit.save(tmp_path / "fit.npz")
    back = PosteriorDraws.load(tmp_path / "fit.npz")
    assert np.array_equal(back.draws, openness_fit.draws)
    assert back.names == openness_fit.names and back.manifest == openness_fit.manifest
    assert back.config == openness_fit.config
    assert np.array_equal(back.stats["divergent"], openness_fit.stats["divergent"])


def test_csv_layout(openness_fit, tmp_path):
    openness_fit.to_csv(tmp_path / "d.csv")
    df = pd.read_csv(tmp_path / "d.csv", float_precision="round_trip")
    assert list(df.columns[:2]) == ["chain", "iteration"]
    assert len(df) == openness_fit.n_total
    np.testing.assert_array_equal(df[openness_fit.names].to_numpy(), openness_fit.flat())


def test_summary_and_diagnostics(openness_fit):
    s = openness_fit.summary()
    assert {"mean", "sd", "q2.5", "q97.5", "rhat", "ess_bulk"} <= set(s.columns)
    rep = openness_fit.diagnostics()
    assert set(rep.rhat) == set(openness_fit.names)
    assert rep.to_dict()["n_divergent"] == rep.n_divergent


def test_convergence_warning_on_short_run(openness_data):
    with pytest.warns(ConvergenceWarning):
        sample_posterior(OPENNESS, openness_data, config=SamplerConfig(chains=2, warmup=20, draws=10))


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(chains=0)
    with pytest.raises(ValueError):
        SamplerConfig(target_accept=1.0)


# -- prior predictive ----------------------------------------------------------

def _newdata(n=50):
    rng = np.random.default_rng(0)
    return Dataset(pd.DataFrame({"female": rng.integers(0, 2, n).astype(float),
                                 "age_group": rng.choice(AGES, n)}), {"age_group": AGES})


def test_prior_predictive_respects_truncation():
    pr = PriorSet({"Intercept": Normal(30, 10), "female": Normal(0, 10)}, {"age_group": HalfStudentT(3, 10)},
                  HalfStudentT(3, 10))
    y = prior_predictive(OPENNESS, pr, _newdata(), 500, seed=1)
    assert y.shape == (500, 50)
    assert np.all((y >= 10) & (y <= 50))
    # a wide prior covers the whole scale
    assert y.min() < 12 and y.max() > 48


def test_degenerate_prior_concentrates():
    pr = PriorSet({"Intercept": Constant(30), "female": Constant(0)}, {"age_group": Constant(1e-9)},
                  Constant(1e-6))
    y = prior_predictive(OPENNESS, pr, _newdata(), 20, seed=2)
    np.testing.assert_allclose(y, 30.0, atol=1e-4)


def test_prior_predictive_is_seeded_and_rejects_flat():
    pr = PriorSet({"Intercept": Normal(30, 10), "female": Normal(0, 10)}, {"age_group": HalfStudentT(3, 10)},
                  HalfStudentT(3, 10))
    a = prior_predictive(OPENNESS, pr, _newdata(), 10, seed=3)
    assert np.array_equal(a, prior_predictive(OPENNESS, pr, _newdata(), 10, seed=3))
    from mrp.dist import Flat
    with pytest.raises(ValueError, match="proper priors"):
        prior_predictive(OPENNESS, pr.replace(beta={"female": Flat()}), _newdata(), 10)
