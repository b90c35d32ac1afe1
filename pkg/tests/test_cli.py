import hashlib
import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from conftest import POST_FORMULA, PRE_FORMULA
from mrp.cli import EXIT_ERROR, EXIT_OK, EXIT_WARN, build_parser, main
from mrp.sampler import PosteriorDraws

SMALL = ["--chains", "1", "--warmup", "150", "--draws", "100", "--target-accept", "0.8"]
COMMANDS = ["fit", "poststratify", "predict-effect", "simulate", "prior-check", "diagnose"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    code = main(["simulate", "--seed", "3", "--out", str(d / "pop.csv"), "--sample", str(d / "sample.csv"),
                 "--truth", str(d / "truth.json"), "--table", str(d / "table.csv")])
    assert code == EXIT_OK
    return d


@pytest.fixture(scope="module")
def fitted(workdir):
    out = workdir / "fit.npz"
    code = main(["fit", "--formula", PRE_FORMULA, "--data", str(workdir / "sample.csv"),
                 "--out", str(out), "--seed", "1", *SMALL])
    assert code in (EXIT_OK, EXIT_WARN)
    return out


def test_simulate_outputs(workdir):
    sample = pd.read_csv(workdir / "sample.csv")
    assert list(sample.columns) == ["gender", "major", "Z", "mathsanxiety_t1", "mathsanxiety_t2"]
    assert len(sample) == 300
    table = pd.read_csv(workdir / "table.csv")
    assert table["N"].sum() == len(pd.read_csv(workdir / "pop.csv")) == 4222
    manifest = json.loads((workdir / "truth.manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["config"]["seed"] == 3
    assert "wall_clock_seconds" in manifest


def test_fit_outputs(fitted):
    fit = PosteriorDraws.load(fitted)
    assert fit.draws.shape[:2] == (1, 100)
    draws = pd.read_csv(fitted.with_suffix(".draws.csv"))
    assert len(draws) == 100 and "b_Intercept" in draws
    summary = json.loads(fitted.with_suffix(".summary.json").read_text())
    assert {"parameters", "diagnostics"} <= set(summary)
    manifest = json.loads(fitted.with_suffix(".manifest.json").read_text())
    assert manifest["formula"] == fit.manifest["formula"]
    assert manifest["data"]["sha256"] == _sha(fitted.parent / "sample.csv")


def test_fit_rerun_is_bit_identical(fitted, tmp_path):
    out = tmp_path / "again.npz"
    main(["fit", "--formula", PRE_FORMULA, "--data", str(fitted.parent / "sample.csv"),
          "--out", str(out), "--seed", "1", *SMALL])
    # the embedded manifest records argv, so only the draws compare across output paths
    assert np.array_equal(PosteriorDraws.load(out).draws, PosteriorDraws.load(fitted).draws)
    assert _sha(out.with_suffix(".draws.csv")) == _sha(fitted.with_suffix(".draws.csv"))


def test_same_command_reproduces_every_output(workdir, monkeypatch):
    monkeypatch.chdir(workdir)
    argv = ["fit", "--formula", PRE_FORMULA, "--data", "sample.csv", "--out", "rep.npz", "--seed", "7", *SMALL]
    files = ["rep.npz", "rep.draws.csv", "rep.summary.json"]
    main(argv)
    first = [_sha(workdir / f) for f in files]
    main(argv)
    assert [_sha(workdir / f) for f in files] == first


def test_poststratify(fitted, workdir, capsys):
    out = workdir / "ps.json"
    argv = ["poststratify", "--fit", str(fitted), "--table", str(workdir / "table.csv"),
            "--out", str(out), "--seed", "2", "--draws-out", str(workdir / "ps.csv")]
    assert main(argv) == EXIT_OK
    res = json.loads(out.read_text())
    assert res["n_draws"] == 100 and len(res["cells"]) == 12
    theta = pd.read_csv(workdir / "ps.csv", float_precision="round_trip")["theta_pop"]
    assert res["mean"] == pytest.approx(theta.mean(), rel=1e-12)
    first = _sha(out)
    main(argv)
    assert _sha(out) == first
    # subset and stdout
    assert main(["poststratify", "--fit", str(fitted), "--table", str(workdir / "table.csv"),
                 "--subset", "major=Engineering|Science"]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["manifest"]["subset"] == {"major": ["Engineering", "Science"]}


def test_diagnose(workdir, capsys):
    # intercept-only fit: no group-scale funnel, so no divergences to mask the thresholds
    fit = workdir / "plain.npz"
    code = main(["fit", "--formula", "mathsanxiety_t1 ~ 1", "--data", str(workdir / "sample.csv"),
                 "--out", str(fit), "--seed", "1", *SMALL])
    assert code in (EXIT_OK, EXIT_WARN)
    capsys.readouterr()
    code = main(["diagnose", "--fit", str(fit), "--rhat-max", "2.0", "--ess-min", "1"])
    report = json.loads(capsys.readouterr().out)
    assert report["n_divergent"] == 0
    assert code == EXIT_OK and report["ok"] is True
    assert main(["diagnose", "--fit", str(fit), "--ess-min", "1e9"]) == EXIT_WARN


def test_prior_check(workdir):
    out = workdir / "prior.csv"
    code = main(["prior-check", "--formula", PRE_FORMULA, "--data", str(workdir / "sample.csv"),
                 "--draws", "20", "--out", str(out), "--seed", "4"])
    assert code == EXIT_OK
    df = pd.read_csv(out)
    assert list(df.columns) == ["draw", "row", "mathsanxiety_t1"] and len(df) == 20 * 300
    assert df["mathsanxiety_t1"].between(10, 50).all()


def test_prior_override(workdir):
    out = workdir / "prior2.csv"
    code = main(["prior-check", "--formula", PRE_FORMULA, "--data", str(workdir / "sample.csv"), "--draws", "5",
                 "--out", str(out), "--prior", "sd=constant(1e-9)", "--prior", "sigma=constant(1e-9)",
                 "--prior", "Intercept=constant(25)"])
    assert code == EXIT_OK
    np.testing.assert_allclose(pd.read_csv(out)["mathsanxiety_t1"], 25.0, atol=1e-4)


def test_predict_effect(workdir):
    out = workdir / "effect.json"
    code = main(["predict-effect", "--pre-formula", PRE_FORMULA, "--post-formula", POST_FORMULA,
                 "--data", str(workdir / "sample.csv"), "--target", str(workdir / "table.csv"),
                 "--n-draws", "10", "--roster-size", "500", "--out", str(out),
                 "--draws-out", str(workdir / "effect.csv"), "--seed", "5", *SMALL])
    assert code in (EXIT_OK, EXIT_WARN)
    res = json.loads(out.read_text())
    assert set(res["transported"]) == {"treated", "control", "contrast"}
    assert set(res["sample"]) == {"treated", "control", "contrast"}
    draws = pd.read_csv(workdir / "effect.csv")
    np.testing.assert_allclose(draws.contrast, draws.treated - draws.control, atol=1e-12)


def test_seed_from_environment(workdir, monkeypatch):
    monkeypatch.setenv("MRP_SEED", "9")
    out = workdir / "env.csv"
    main(["prior-check", "--formula", PRE_FORMULA, "--data", str(workdir / "sample.csv"),
          "--draws", "3", "--out", str(out)])
    assert json.loads((workdir / "env.manifest.json").read_text())["seed"] == 9
    explicit = workdir / "explicit.csv"
    monkeypatch.delenv("MRP_SEED")
    main(["prior-check", "--formula", PRE_FORMULA, "--data", str(workdir / "sample.csv"),
          "--draws", "3", "--out", str(explicit), "--seed", "9"])
    assert _sha(out) == _sha(explicit)


def test_bad_environment_seed(workdir, monkeypatch, capsys):
    monkeypatch.setenv("MRP_SEED", "abc")
    code = main(["prior-check", "--formula", PRE_FORMULA, "--data", str(workdir / "sample.csv"),
                 "--draws", "3", "--out", str(workdir / "x.csv")])
    assert code == EXIT_ERROR and "MRP_SEED" in capsys.readouterr().err


# -- errors --------------------------------------------------------------------

@pytest.mark.parametrize("argv, flag", [
    (["fit", "--formula", "y ~ x", "--data", "nope.csv"], "--data"),
    (["poststratify", "--fit", "nope.npz", "--table", "t.csv"], "--fit"),
    (["diagnose", "--fit", "nope.npz"], "--fit"),
    (["simulate", "--config", "nope.json"], "--config"),
    (["prior-check", "--formula", "y ~ x", "--data", "nope.csv"], "--data"),
])
def test_missing_file_names_flag(argv, flag, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_ERROR
    err = capsys.readouterr().err
    assert flag in err and "nope" in err


def test_bad_formula(workdir, capsys):
    code = main(["fit", "--formula", "y ~ (1|", "--data", str(workdir / "sample.csv")])
    assert code == EXIT_ERROR and "--formula" in capsys.readouterr().err


def test_missing_column(workdir, capsys):
    code = main(["fit", "--formula", "nope ~ 1", "--data", str(workdir / "sample.csv"), *SMALL])
    assert code == EXIT_ERROR and "nope" in capsys.readouterr().err


def test_bad_prior(workdir, capsys):
    code = main(["prior-check", "--formula", PRE_FORMULA, "--data", str(workdir / "sample.csv"),
                 "--prior", "sd_nope=normal(0,1)"])
    assert code == EXIT_ERROR and "--prior" in capsys.readouterr().err


def test_table_lacking_level_is_fatal(fitted, tmp_path, capsys):
    pd.DataFrame({"gender": ["female"], "major": ["Law"], "N": [10]}).to_csv(tmp_path / "t.csv", index=False)
    code = main(["poststratify", "--fit", str(fitted), "--table", str(tmp_path / "t.csv")])
    assert code == EXIT_ERROR and "--table" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["fit", "--bogus"], ["nope"], [], ["fit", "--chains", "0",
                                                                     "--formula", "y~1", "--data", "d"]])
def test_usage_errors_exit_one(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == EXIT_ERROR
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("command", COMMANDS)
def test_help(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    assert command in capsys.readouterr().out


def test_parser_lists_every_command():
    text = build_parser().format_help()
    assert all(c in text for c in COMMANDS)


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "mrp.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("mrp ")
