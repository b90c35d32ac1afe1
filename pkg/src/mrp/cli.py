"""Command-line interface: ``mrp <command> [options]``.

Exit codes: 0 success, 1 error, 2 finished with convergence warnings.
Seeds come from ``--seed``, else the ``MRP_SEED`` environment variable,
else 0. Every command records a manifest of its inputs and settings.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .data import CATEGORICAL, NUMERIC, DataError, PoststratTable, build_poststrat_table, load_csv
from .dist import parse_prior
from .effects import fit_two_stage, raw_arm_differences, transport_effect
from .formula import FormulaError, parse_formula
from .model import PriorSet, default_priors
from .poststrat import aggregate, predict_cells
from .sampler import ConvergenceWarning, PosteriorDraws, SamplerConfig, prior_predictive, \
    sample_posterior
from .simulate import UniversityConfig, draw_convenience_sample, generate_university

EXIT_OK, EXIT_ERROR, EXIT_WARN = 0, 1, 2


class CLIError(Exception):
    def __init__(self, flag, message):
        super().__init__(f"{flag}: {message}" if flag else message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


# -- helpers -------------------------------------------------------------------

def _resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get("MRP_SEED")
    if env is None:
        return 0
    try:
        value = int(env)
    except ValueError:
        raise CLIError("MRP_SEED", f"not an integer: {env!r}") from None
    if value < 0:
        raise CLIError("MRP_SEED", "must be nonnegative")
    return value


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _guard(flag, fn, *args, **kwargs):
    """Run ``fn`` and attribute input errors to the flag that supplied the input."""
    try:
        return fn(*args, **kwargs)
    except FileNotFoundError as exc:
        raise CLIError(flag, f"file not found: {exc.filename}") from None
    except (FormulaError, DataError, ValueError, KeyError, OSError) as exc:
        raise CLIError(flag, str(exc)) from None


def _parse_formula(flag, text):
    return _guard(flag, parse_formula, text)


def _model_schema(specs):
    schema = {}
    for spec in specs:
        schema[spec.outcome] = NUMERIC
        for t in spec.varying_terms:
            schema[t.group] = CATEGORICAL
            for s in t.slopes:
                schema[s] = NUMERIC
    return schema


def _load_model_data(flag, path, specs, extra_cols=(), categorical=()):
    cols = []
    for spec in specs:
        cols += [spec.outcome] + list(spec.predictors)
    cols += list(extra_cols)
    schema = _model_schema(specs)
    schema.update({c: CATEGORICAL for c in categorical})
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        data = _guard(flag, load_csv, path, schema, usecols=list(dict.fromkeys(cols)))
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return data


def _apply_prior_overrides(priors, overrides):
    """``TARGET=DIST`` where TARGET is b, Intercept, b_<coef>, sd, sd_<group> or sigma."""
    for item in overrides or ():
        target, sep, text = item.partition("=")
        if not sep:
            raise CLIError("--prior", f"expected TARGET=DIST, got {item!r}")
        target = target.strip()
        prior = _guard("--prior", parse_prior, text)
        if target == "b":
            priors = priors.with_beta(prior)
        elif target == "Intercept" or target.startswith("b_"):
            name = "Intercept" if target == "Intercept" else target[2:]
            if name not in priors.beta:
                raise CLIError("--prior", f"no coefficient {name!r}; have {list(priors.beta)}")
            priors = priors.replace(beta={name: prior})
        elif target == "sd":
            priors = priors.replace(group_sd={g: prior for g in priors.group_sd})
        elif target.startswith("sd_"):
            if target[3:] not in priors.group_sd:
                raise CLIError("--prior", f"no grouping factor {target[3:]!r}")
            priors = priors.replace(group_sd={target[3:]: prior})
        elif target == "sigma":
            priors = priors.replace(sigma=prior)
        else:
            raise CLIError("--prior", f"unknown prior target {target!r}")
    return priors


def _read_priors(path):
    with open(path) as fh:
        return PriorSet.from_dict(json.load(fh))


def _priors(args, spec, data, overrides_attr="prior", file_attr="priors"):
    path = getattr(args, file_attr, None)
    if path:
        priors = _guard(f"--{file_attr.replace('_', '-')}", _read_priors, path)
    else:
        priors = default_priors(spec, data)
    return _apply_prior_overrides(priors, getattr(args, overrides_attr, None))


def _sampler_config(args, seed):
    try:
        return SamplerConfig(chains=args.chains, warmup=args.warmup, draws=args.draws,
                             seed=seed, target_accept=args.target_accept,
                             max_treedepth=args.max_treedepth, metric=args.metric,
                             n_jobs=args.cores if args.cores is not None else args.chains)
    except ValueError as exc:
        raise CLIError("sampler options", str(exc)) from None


def _manifest(command, argv, seed, **fields):
    out = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "version": __version__,
    }
    out.update(fields)
    return out


def _finish_manifest(manifest, started, t0):
    """Sidecar copy with timing; embedded manifests omit it to stay reproducible."""
    return {**manifest, "started": started,
            "wall_clock_seconds": round(time.perf_counter() - t0, 3)}


def _write_json(path, obj):
    text = json.dumps(obj, indent=2, default=_json_default)
    if path is None or path == "-":
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _sidecar(path, suffix):
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _parse_subset(text):
    if not text:
        return None
    subset = {}
    for part in text.split(","):
        var, sep, level = part.partition("=")
        if not sep or not var.strip():
            raise CLIError("--subset", f"expected var=level[|level...], got {part!r}")
        subset[var.strip()] = [lv.strip() for lv in level.split("|")]
    return subset


def _parse_assignments(flag, items):
    out = {}
    for item in items or ():
        var, sep, value = item.partition("=")
        if not sep:
            raise CLIError(flag, f"expected var=value, got {item!r}")
        try:
            out[var.strip()] = float(value)
        except ValueError:
            raise CLIError(flag, f"value for {var!r} must be numeric") from None
    return out


def _load_target(flag, path, count_col="N"):
    header = _guard(flag, pd.read_csv, path, nrows=0).columns
    if count_col in header:
        return _guard(flag, PoststratTable.from_csv, path, count_col)
    return None


# -- commands ------------------------------------------------------------------

def cmd_fit(args, argv):
    t0 = time.perf_counter()
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    seed = _resolve_seed(args.seed)
    spec = _parse_formula("--formula", args.formula)
    data = _load_model_data("--data", args.data, [spec], categorical=args.categorical or ())
    priors = _priors(args, spec, data)
    config = _sampler_config(args, seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        fit = _guard("--formula", sample_posterior, spec, data, priors, config)
    report = fit.diagnostics()
    manifest = _manifest("fit", argv, seed, formula=str(spec),
                         data={"path": str(args.data), "sha256": _file_sha256(args.data),
                               "dataset_sha256": data.fingerprint(), "n_rows": data.n_rows,
                               "n_dropped": data.n_dropped},
                         priors=priors.to_dict(), sampler=config.to_dict())
    fit.manifest.update(manifest)
    out = Path(args.out)
    fit.save(out)
    fit.to_csv(_sidecar(out, ".draws.csv"))
    summary = fit.summary().reset_index().to_dict(orient="records")
    _write_json(_sidecar(out, ".summary.json"), {"parameters": summary,
                                                 "diagnostics": report.to_dict()})
    _write_json(_sidecar(out, ".manifest.json"), _finish_manifest(manifest, started, t0))
    print(fit.summary().round(3).to_string())
    return _report_status(report)


def _report_status(report):
    if report.ok:
        return EXIT_OK
    for msg in report.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    return EXIT_WARN


def _load_fit(path):
    return _guard("--fit", PosteriorDraws.load, path)


def cmd_diagnose(args, argv):
    fit = _load_fit(args.fit)
    report = fit.diagnostics(rhat_max=args.rhat_max, ess_min=args.ess_min)
    _write_json(args.out, report.to_dict())
    return _report_status(report)


def cmd_poststratify(args, argv):
    t0 = time.perf_counter()
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    seed = _resolve_seed(args.seed)
    fit = _load_fit(args.fit)
    table = _guard("--table", PoststratTable.from_csv, args.table, args.count_col)
    subset = _parse_subset(args.subset)
    extra = _parse_assignments("--set", args.set)
    cells = _guard("--table", predict_cells, fit, table, args.mode, seed, args.n_draws, extra)
    est = _guard("--subset", aggregate, cells, subset,
                 "theta" if args.mode == "expectation" else "predictive")
    manifest = _manifest("poststratify", argv, seed,
                         fit={"path": str(args.fit), "sha256": _file_sha256(args.fit),
                              "formula": str(fit.spec)},
                         table={"path": str(args.table), "sha256": _file_sha256(args.table)},
                         mode=args.mode, subset=subset, set=extra, n_draws=args.n_draws)
    result = dict(est.summary)
    result["mode"] = args.mode
    result["cells"] = cells.to_frame().to_dict(orient="records")
    if args.draws_out:
        pd.DataFrame({"draw": np.arange(1, est.theta_pop.size + 1),
                      "theta_pop": est.theta_pop}).to_csv(args.draws_out, index=False,
                                                          float_format="%.17g")
    result["manifest"] = manifest
    _write_json(args.out, result)
    if args.out and args.out != "-":
        _write_json(_sidecar(args.out, ".manifest.json"), _finish_manifest(manifest, started, t0))
    return EXIT_OK


def cmd_predict_effect(args, argv):
    t0 = time.perf_counter()
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    seed = _resolve_seed(args.seed)
    pre = _parse_formula("--pre-formula", args.pre_formula)
    post = _parse_formula("--post-formula", args.post_formula)
    data = _load_model_data("--data", args.data, [pre, post], extra_cols=[args.treatment])
    pre_priors = _priors(args, pre, data, "pre_prior", "pre_priors")
    post_priors = _priors(args, post, data, "post_prior", "post_priors")
    config = _sampler_config(args, seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model = _guard("--data", fit_two_stage, pre, post, data, (pre_priors, post_priors),
                       config, args.treatment)
    target = _load_target("--target", args.target, args.count_col)
    if target is None:
        extra = [pre.outcome] if args.observed_pre else []
        target = _load_model_data("--target", args.target, [], extra_cols=list(post.groups) + extra,
                                  categorical=post.groups)
    eff = _guard("--target", transport_effect, model, target, args.n_draws, seed,
                 use_observed_pre=args.observed_pre, mode=args.mode,
                 roster_size=args.roster_size)
    raw = raw_arm_differences(data, pre.outcome, post.outcome, args.treatment)
    reports = {"pre": model.pre_fit.diagnostics(), "post": model.post_fit.diagnostics()}
    manifest = _manifest("predict-effect", argv, seed, pre_formula=str(pre),
                         post_formula=str(post),
                         data={"path": str(args.data), "sha256": _file_sha256(args.data)},
                         target={"path": str(args.target), "sha256": _file_sha256(args.target)},
                         priors={"pre": pre_priors.to_dict(), "post": post_priors.to_dict()},
                         sampler=config.to_dict(), n_draws=args.n_draws, mode=args.mode,
                         observed_pre=args.observed_pre)
    result = {"transported": eff.summary(), "sample": raw,
              "diagnostics": {k: r.to_dict() for k, r in reports.items()}}
    if args.draws_out:
        pd.DataFrame({"draw": np.arange(1, eff.treated.size + 1), "treated": eff.treated,
                      "control": eff.control, "contrast": eff.contrast}).to_csv(
            args.draws_out, index=False, float_format="%.17g")
    result["manifest"] = manifest
    _write_json(args.out, result)
    if args.out and args.out != "-":
        _write_json(_sidecar(args.out, ".manifest.json"), _finish_manifest(manifest, started, t0))
    for role, r in reports.items():
        for msg in r.warnings:
            print(f"warning ({role} model): {msg}", file=sys.stderr)
    return EXIT_OK if all(r.ok for r in reports.values()) else EXIT_WARN


def cmd_simulate(args, argv):
    t0 = time.perf_counter()
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    if args.config:
        cfg = _guard("--config", UniversityConfig.from_json, args.config)
    else:
        cfg = UniversityConfig()
    if args.seed is not None or "MRP_SEED" in os.environ:
        cfg = _guard("--seed", UniversityConfig.from_dict,
                     {**cfg.to_dict(), "seed": _resolve_seed(args.seed)})
    population, truth = generate_university(cfg)
    sample = draw_convenience_sample(population, cfg)
    population.to_csv(args.out)
    sample.to_csv(args.sample)
    if args.table:
        build_poststrat_table(population, ["gender", "major"]).to_csv(args.table)
    _write_json(args.truth, truth)
    manifest = _manifest("simulate", argv, cfg.seed, config=cfg.to_dict(),
                         outputs={"population": str(args.out), "sample": str(args.sample),
                                  "truth": str(args.truth), "table": args.table})
    _write_json(_sidecar(args.truth, ".manifest.json"), _finish_manifest(manifest, started, t0))
    return EXIT_OK


def cmd_prior_check(args, argv):
    t0 = time.perf_counter()
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    seed = _resolve_seed(args.seed)
    spec = _parse_formula("--formula", args.formula)
    data = _load_model_data("--data", args.data, [spec], categorical=args.categorical or ())
    priors = _priors(args, spec, data)
    sims = _guard("--prior", prior_predictive, spec, priors, data, args.draws, seed)
    n_draws, n = sims.shape
    pd.DataFrame({
        "draw": np.repeat(np.arange(1, n_draws + 1), n),
        "row": np.tile(np.arange(1, n + 1), n_draws),
        spec.outcome: sims.ravel(),
    }).to_csv(args.out, index=False, float_format="%.17g")
    manifest = _manifest("prior-check", argv, seed, formula=str(spec),
                         data={"path": str(args.data), "sha256": _file_sha256(args.data)},
                         priors=priors.to_dict(), draws=args.draws)
    _write_json(_sidecar(args.out, ".manifest.json"), _finish_manifest(manifest, started, t0))
    lb, ub = spec.bounds
    print(f"{n_draws} prior-predictive draws x {n} rows; "
          f"mean {sims.mean():.3f}, 1%-99% range [{np.quantile(sims, 0.01):.3f}, "
          f"{np.quantile(sims, 0.99):.3f}], bounds [{lb}, {ub}]")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be nonnegative")
    return value


def _pos_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _add_seed(p):
    p.add_argument("--seed", type=_nonneg_int, default=None,
                   help="random seed (default: $MRP_SEED, else 0)")


def _add_sampler(p):
    p.add_argument("--chains", type=_pos_int, default=4)
    p.add_argument("--warmup", type=_pos_int, default=1000, help="warmup iterations per chain")
    p.add_argument("--draws", type=_pos_int, default=1000, help="kept draws per chain")
    p.add_argument("--target-accept", type=float, default=0.99,
                   help="target acceptance rate for step-size adaptation (default 0.99)")
    p.add_argument("--max-treedepth", type=_pos_int, default=10)
    p.add_argument("--metric", choices=("diag", "dense"), default="diag",
                   help="inverse-metric shape adapted in warmup (default diag)")
    p.add_argument("--cores", type=_pos_int, default=None,
                   help="parallel chain processes (default: number of chains)")
    _add_seed(p)


def _add_priors(p, prefix=""):
    flag = f"--{prefix}prior"
    p.add_argument(flag, action="append", metavar="TARGET=DIST",
                   help="override a prior, e.g. 'b=normal(0,10)', 'sd_major=half_student_t(3,5)', "
                        "'sigma=half_student_t(3,2.5)'; repeatable")
    p.add_argument(f"--{prefix}priors", metavar="JSON", help="full prior set as JSON")


def build_parser():
    parser = _Parser(prog="mrp", description="Multilevel regression and poststratification.")
    parser.add_argument("--version", action="version", version=f"mrp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fit", help="sample a model posterior")
    p.add_argument("--formula", required=True)
    p.add_argument("--data", required=True, help="CSV file")
    p.add_argument("--categorical", action="append", metavar="COLUMN",
                   help="treat a column as categorical; repeatable")
    p.add_argument("--out", default="fit.npz", help="fit file; sidecars share its stem")
    _add_priors(p)
    _add_sampler(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("poststratify", help="population estimate from a fit and a table")
    p.add_argument("--fit", required=True)
    p.add_argument("--table", required=True, help="CSV with one column per variable plus counts")
    p.add_argument("--count-col", default="N")
    p.add_argument("--mode", choices=("expectation", "predictive"), default="expectation")
    p.add_argument("--subset", help="var=level[|level],... restricts the population")
    p.add_argument("--set", action="append", metavar="VAR=VALUE",
                   help="value for a model column the table lacks; repeatable")
    p.add_argument("--n-draws", type=_pos_int, default=None,
                   help="posterior draws to use (default: all)")
    p.add_argument("--out", default="-", help="JSON output (default: stdout)")
    p.add_argument("--draws-out", help="per-draw CSV of the population estimate")
    _add_seed(p)
    p.set_defaults(func=cmd_poststratify)

    p = sub.add_parser("predict-effect", help="fit pre/post models and transport arm effects")
    p.add_argument("--pre-formula", required=True)
    p.add_argument("--post-formula", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True,
                   help="poststratification table (has a count column) or roster CSV")
    p.add_argument("--count-col", default="N")
    p.add_argument("--treatment", default="Z")
    p.add_argument("--n-draws", type=_pos_int, default=20)
    p.add_argument("--mode", choices=("expectation", "predictive"), default="expectation")
    p.add_argument("--observed-pre", action="store_true",
                   help="use the target's own pre-scores instead of simulating them")
    p.add_argument("--roster-size", type=_pos_int, default=10_000)
    p.add_argument("--out", default="-")
    p.add_argument("--draws-out", help="per-draw CSV of treated, control and contrast")
    _add_priors(p, "pre-")
    _add_priors(p, "post-")
    _add_sampler(p)
    p.set_defaults(func=cmd_predict_effect)

    p = sub.add_parser("simulate", help="generate the synthetic university and a sample")
    p.add_argument("--config", help="UniversityConfig JSON (default: built-in)")
    p.add_argument("--out", default="population.csv")
    p.add_argument("--sample", default="sample.csv")
    p.add_argument("--truth", default="truth.json")
    p.add_argument("--table", help="also write the population's gender x major table")
    _add_seed(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("prior-check", help="simulate outcomes from the priors alone")
    p.add_argument("--formula", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--categorical", action="append", metavar="COLUMN")
    p.add_argument("--draws", type=_pos_int, default=500)
    p.add_argument("--out", default="prior_predictive.csv")
    _add_priors(p)
    _add_seed(p)
    p.set_defaults(func=cmd_prior_check)

    p = sub.add_parser("diagnose", help="convergence report for a saved fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--rhat-max", type=float, default=1.01)
    p.add_argument("--ess-min", type=float, default=400.0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, argv)
    except CLIError as exc:
        print(f"mrp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
