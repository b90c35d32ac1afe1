import numpy as np
import pandas as pd
import pytest

from conftest import POST_FORMULA, PRE_FORMULA, fit_quietly, quick_config
from mrp.data import DataError, Dataset, PoststratTable
from mrp.effects import (EffectEstimate, TwoStageModel, fit_two_stage, predict_replication, raw_arm_differences,
                         transport_effect)
from mrp.poststrat import posterior_predict
from mrp.simulate import (POST, PRE, TREATMENT, UniversityConfig, draw_convenience_sample,
                          generate_university)


def test_treatment_must_be_binary(university):
    *_, sample = university
    z = sample.numeric(TREATMENT).copy()
    z[0] = 2.0
    bad = sample.with_column(TREATMENT, z, kind="numeric")
    with pytest.raises(DataError, match="0/1"):
        fit_two_stage(PRE_FORMULA, POST_FORMULA, bad)
    with pytest.raises(DataError, match="0/1"):
        raw_arm_differences(bad, PRE, POST)


def test_model_structure_checks(university):
    *_, sample = university
    with pytest.raises(ValueError, match="pre-score"):
        fit_two_stage(PRE_FORMULA, "mathsanxiety_t2 ~ (Z|gender) + (Z|major)", sample)
    with pytest.raises(ValueError, match="share grouping"):
        fit_two_stage(PRE_FORMULA, "mathsanxiety_t2 ~ mathsanxiety_t1 + (Z|major)", sample)
    with pytest.raises(ValueError, match="cannot depend on treatment"):
        fit_two_stage("mathsanxiety_t1 ~ Z + (1|gender) + (1|major)",
                      "mathsanxiety_t2 ~ mathsanxiety_t1 + Z + (1|gender) + (1|major)", sample)


def test_raw_arm_differences():
    d = Dataset(pd.DataFrame({"Z": [1.0, 1, 0, 0], "a": [10.0, 20, 30, 40], "b": [12.0, 18, 33, 45]}))
    raw = raw_arm_differences(d, "a", "b")
    assert raw == {"treated": 0.0, "control": 4.0, "contrast": -4.0}


def test_fit_manifest_links_stages(two_stage):
    assert two_stage.pre == PRE and two_stage.post == POST
    assert two_stage.pre_fit.manifest["two_stage"]["role"] == "pre"
    assert two_stage.post_fit.manifest["two_stage"]["partner"] == PRE_FORMULA
    assert sorted(two_stage.adjustment_vars) == ["gender", "major"]
    # the stages sample from different seeds
    assert two_stage.pre_fit.config.seed != two_stage.post_fit.config.seed


def test_self_transport_with_observed_pre_matches_direct_prediction(two_stage, university):
    *_, sample = university
    est = transport_effect(two_stage, sample, n_draws=None, use_observed_pre=True, seed=0)
    n = two_stage.post_fit.n_total
    pre = sample.numeric(PRE)
    for z, got in ((1.0, est.treated), (0.0, est.control)):
        data = sample.with_column(TREATMENT, np.full(sample.n_rows, z), kind="numeric")
        mean = posterior_predict(two_stage.post_fit, data, n, seed=0, expectation=True)
        np.testing.assert_allclose(got, (mean - pre).mean(axis=1), rtol=1e-10)


def test_self_transport_with_simulated_pre(two_stage, university):
    *_, sample = university
    sim = transport_effect(two_stage, sample, n_draws=100, seed=1)
    obs = transport_effect(two_stage, sample, n_draws=100, seed=1, use_observed_pre=True)
    # pre-score simulation adds noise but no bias in either arm
    for a, b in ((sim.treated, obs.treated), (sim.control, obs.control)):
        se = np.hypot(a.std(), b.std()) / np.sqrt(100)
        assert abs(a.mean() - b.mean()) < 4 * se + 0.1
    # the model sees the raw treated-arm gap in its own training data
    raw = raw_arm_differences(sample, PRE, POST)
    assert abs(obs.contrast.mean() - raw["contrast"]) < 1.0


def test_transport_recovers_population_truth(two_stage, university):
    cfg, pop, truth, sample = university
    counts = pd.Series(list(zip(pop.values("gender"), pop.values("major")))).value_counts()
    table = PoststratTable(("gender", "major"), tuple(counts.index), counts.to_numpy())
    est = transport_effect(two_stage, table, n_draws=20, seed=2)
    raw = raw_arm_differences(sample, PRE, POST)
    assert abs(est.treated.mean() - truth["effect_treated"]) < abs(raw["treated"] - truth["effect_treated"])


def test_arms_share_pre_scores_and_noise(two_stage, university):
    # with every Z slope zeroed the arms are identical draw by draw
    post = two_stage.post_fit
    flat = post.flat().copy()
    for i, name in enumerate(post.names):
        if name.endswith(",Z]") or name.endswith("__Z"):
            flat[:, i] = 0.0
    null = TwoStageModel(two_stage.pre_fit, post.with_draws(flat))
    *_, sample = university
    for mode in ("expectation", "predictive"):
        est = transport_effect(null, sample, n_draws=10, seed=3, mode=mode)
        np.testing.assert_array_equal(est.treated, est.control)


def test_transport_is_seeded_and_modes(two_stage, university):
    *_, sample = university
    a = transport_effect(two_stage, sample, n_draws=5, seed=4, mode="predictive")
    b = transport_effect(two_stage, sample, n_draws=5, seed=4, mode="predictive")
    assert np.array_equal(a.treated, b.treated) and np.array_equal(a.control, b.control)
    with pytest.raises(ValueError, match="mode"):
        transport_effect(two_stage, sample, mode="nope")
    summary = a.summary()
    assert set(summary) == {"treated", "control", "contrast"}


def test_replication_of_same_sample_equals_self_transport(two_stage, university):
    *_, sample = university
    a = predict_replication(two_stage, sample, n_draws=10, seed=5)
    b = transport_effect(two_stage, sample, n_draws=10, seed=5)
    assert np.array_equal(a.treated, b.treated) and np.array_equal(a.control, b.control)


def test_unseen_major_widens_intervals(two_stage):
    def roster(major):
        return Dataset(pd.DataFrame({"gender": ["female", "male"] * 50, "major": [major] * 100}))
    seen = transport_effect(two_stage, roster("Law"), n_draws=200, seed=6)
    unseen = transport_effect(two_stage, roster("Astronomy"), n_draws=200, seed=6)
    assert np.all(np.isfinite(unseen.treated))
    assert unseen.contrast.std() > seen.contrast.std()


def test_engineering_heavy_replication_moves_toward_its_truth(two_stage, university):
    cfg, pop, _, sample = university
    heavy = UniversityConfig(**{**cfg.to_dict(), "bias_major": {m: (10.0 if m == "Engineering" else 1.0)
                                                                for m in cfg.majors},
                                "bias_gender": {g: 1.0 for g in cfg.genders}})
    s2 = draw_convenience_sample(pop, heavy, seed=99, potential_outcomes=True)
    pred = predict_replication(two_stage, s2, n_draws=20, seed=7)
    raw1 = raw_arm_differences(sample, PRE, POST)
    true2 = float(np.mean(s2.numeric("mathsanxiety_t2_treated") - s2.numeric(PRE)))
    lo, hi = sorted((raw1["treated"], true2))
    # engineering has the largest effect, so the prediction moves past sample 1's raw gap
    assert pred.treated.mean() < raw1["treated"]
    assert lo - 0.5 < pred.treated.mean() < hi + 0.5


def test_roster_expansion_and_target_checks(two_stage):
    small = PoststratTable(("gender", "major"),
                           tuple((g, m) for g in ("female", "male") for m in
                                 ("Psychology", "Liberal Arts", "Engineering", "Science", "Economics", "Law")),
                           np.full(12, 3))
    est = transport_effect(two_stage, small, n_draws=3, seed=8)
    assert isinstance(est, EffectEstimate) and est.treated.shape == (3,)
    with pytest.raises(DataError, match="adjustment variable"):
        transport_effect(two_stage, Dataset(pd.DataFrame({"gender": ["female"]})), n_draws=2)
    with pytest.raises(DataError, match="observed pre-score"):
        transport_effect(two_stage, Dataset(pd.DataFrame({"gender": ["female"], "major": ["Law"]})),
                         n_draws=2, use_observed_pre=True)


def test_null_effect_slopes_cover_zero():
    cfg = UniversityConfig(seed=21).homogeneous(0.0)
    pop, _ = generate_university(cfg)
    sample = draw_convenience_sample(pop, cfg)
    fit = fit_quietly(POST_FORMULA, sample, config=quick_config(seed=3, chains=1, warmup=300, draws=300,
                                                               target_accept=0.8))
    for name in fit.names:
        if name.startswith("r_") and name.endswith(",Z]"):
            lo, hi = np.quantile(fit.param(name), [0.025, 0.975])
            assert lo < 0 < hi, name


@pytest.mark.slow
def test_default_config_fits_converge(university):
    # full default settings: 4 chains, 1000 warmup, 1000 draws, target_accept 0.99
    *_, sample = university
    model = fit_two_stage(PRE_FORMULA, POST_FORMULA, sample)
    for fit in (model.pre_fit, model.post_fit):
        rep = fit.diagnostics()
        assert max(rep.rhat.values()) < 1.01
