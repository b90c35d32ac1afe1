"""Multi-chain posterior sampling and the draws container."""
from __future__ import annotations

import io
import json
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .. import __version__
from ..data import Dataset
from ..dist import Flat, truncnorm_sample
from ..formula import ModelSpec, parse_formula
from ..model import DesignInfo, LogDensity, PriorSet, build_design, default_priors
from .diagnostics import ess_bulk, mcse_mean, split_rhat
from .nuts import NUTS, DualAveraging, WindowedAdaptation, _Welford

__all__ = [
    "SamplerConfig",
    "SamplerError",
    "PosteriorDraws",
    "DiagnosticReport",
    "ConvergenceWarning",
    "sample_posterior",
    "prior_predictive",
    "RHAT_MAX",
    "ESS_MIN",
]

RHAT_MAX = 1.01
ESS_MIN = 400.0


class SamplerError(RuntimeError):
    pass


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    """MCMC settings. ``target_accept`` plays the role of Stan's ``adapt_delta``.

    ``metric="dense"`` adapts a full covariance instead of per-parameter
    variances; it helps when intercepts and group effects trade off.
    """

    chains: int = 4
    warmup: int = 1000
    draws: int = 1000
    seed: int = 0
    target_accept: float = 0.99
    max_treedepth: int = 10
    n_jobs: int = 1
    metric: str = "diag"

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.warmup < 1 or self.draws < 1:
            raise ValueError("warmup and draws must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must be in (0, 1)")
        if self.max_treedepth < 1:
            raise ValueError("max_treedepth must be >= 1")
        if self.metric not in ("diag", "dense"):
            raise ValueError(f"metric must be 'diag' or 'dense', got {self.metric!r}")

    @property
    def draws_per_chain(self):
        return self.draws

    def to_dict(self):
        d = asdict(self)
        d.pop("n_jobs")  # does not affect results
        return d


@dataclass
class DiagnosticReport:
    rhat: dict
    ess: dict
    n_divergent: int
    n_max_treedepth: int
    warnings: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.warnings

    def to_dict(self):
        return {
            "ok": self.ok,
            "max_rhat": max(self.rhat.values()) if self.rhat else None,
            "min_ess": min(self.ess.values()) if self.ess else None,
            "n_divergent": self.n_divergent,
            "n_max_treedepth": self.n_max_treedepth,
            "rhat": self.rhat,
            "ess_bulk": self.ess,
            "warnings": list(self.warnings),
        }


class PosteriorDraws:
    """Posterior draws of the constrained parameters, ``(chains, draws, dim)``."""

    def __init__(self, names, draws, info, priors, config=None, stats=None, manifest=None):
        draws = np.asarray(draws, dtype=float)
        if draws.ndim != 3 or draws.shape[2] != len(names):
            raise ValueError(f"draws shape {draws.shape} does not match {len(names)} names")
        if not np.all(np.isfinite(draws)):
            raise ValueError("posterior draws contain non-finite values")
        self.names = list(names)
        self.draws = draws
        self.info = info
        self.priors = priors
        self.config = config
        self.stats = stats or {}
        self.manifest = manifest or {}
        self._index = {n: i for i, n in enumerate(self.names)}

    @property
    def spec(self):
        return self.info.spec

    @property
    def n_chains(self):
        return self.draws.shape[0]

    @property
    def n_draws(self):
        return self.draws.shape[1]

    @property
    def n_total(self):
        return self.n_chains * self.n_draws

    def param(self, name):
        try:
            return self.draws[:, :, self._index[name]]
        except KeyError:
            raise KeyError(f"no parameter {name!r}") from None

    def flat(self):
        return self.draws.reshape(-1, self.draws.shape[2])

    def structured(self, rows=None):
        flat = self.flat() if rows is None else self.flat()[rows]
        return self.info.split(flat)

    def with_draws(self, flat):
        """Copy with the flattened draws replaced (same names and metadata)."""
        flat = np.asarray(flat, dtype=float)
        return PosteriorDraws(self.names, flat.reshape(self.draws.shape), self.info, self.priors,
                              self.config, self.stats, self.manifest)

    def summary(self, probs=(0.025, 0.975)):
        rows = []
        for name in self.names:
            x = self.param(name)
            row = {"parameter": name, "mean": x.mean(), "sd": x.std(ddof=1)}
            for p in probs:
                row[f"q{100 * p:g}"] = np.quantile(x, p)
            if self.n_draws >= 4:
                row["rhat"] = split_rhat(x)
                row["ess_bulk"] = ess_bulk(x)
                row["mcse_mean"] = mcse_mean(x)
            rows.append(row)
        return pd.DataFrame(rows).set_index("parameter")

    def diagnostics(self, rhat_max=RHAT_MAX, ess_min=ESS_MIN):
        rhat, ess = {}, {}
        msgs = []
        if self.n_draws >= 4:
            for name in self.names:
                x = self.param(name)
                rhat[name] = float(split_rhat(x))
                ess[name] = float(ess_bulk(x))
            bad_r = sorted((n for n, r in rhat.items() if not r < rhat_max), key=lambda n: -rhat[n])
            bad_e = sorted((n for n, e in ess.items() if not e > ess_min), key=lambda n: ess[n])
            if bad_r:
                msgs.append("R-hat >= %.2f for: %s" % (rhat_max, ", ".join(
                    f"{n} ({rhat[n]:.3f})" for n in bad_r)))
            if bad_e:
                msgs.append("bulk ESS <= %g for: %s" % (ess_min, ", ".join(
                    f"{n} ({ess[n]:.0f})" for n in bad_e)))
        else:
            msgs.append("too few draws for convergence diagnostics")
        n_div = int(np.sum(self.stats.get("divergent", 0)))
        n_td = 0
        if self.config is not None and "treedepth" in self.stats:
            n_td = int(np.sum(np.asarray(self.stats["treedepth"]) >= self.config.max_treedepth))
        if n_div:
            msgs.append(f"{n_div} divergent transitions after warmup")
        if n_td:
            msgs.append(f"{n_td} transitions hit the maximum tree depth")
        return DiagnosticReport(rhat, ess, n_div, n_td, msgs)

    # -- serialization ----------------------------------------------------------

    def to_frame(self):
        c, d, _ = self.draws.shape
        df = pd.DataFrame(self.flat(), columns=self.names)
        df.insert(0, "iteration", np.tile(np.arange(1, d + 1), c))
        df.insert(0, "chain", np.repeat(np.arange(1, c + 1), d))
        return df

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def _meta(self):
        return {
            "names": self.names,
            "info": self.info.to_dict(),
            "priors": self.priors.to_dict(),
            "config": self.config.to_dict() if self.config else None,
            "manifest": self.manifest,
        }

    def save(self, path):
        """Binary format: ``.npz`` with the draws, sampler stats and JSON metadata."""
        arrays = {"draws": self.draws}
        arrays.update({f"stat_{k}": np.asarray(v) for k, v in self.stats.items()})
        arrays["meta"] = np.frombuffer(json.dumps(self._meta()).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez_compressed(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            draws = z["draws"]
            stats = {k[5:]: z[k] for k in z.files if k.startswith("stat_")}
        cfg = SamplerConfig(**meta["config"]) if meta.get("config") else None
        return cls(meta["names"], draws, DesignInfo.from_dict(meta["info"]),
                   PriorSet.from_dict(meta["priors"]), cfg, stats, meta.get("manifest"))

    def __repr__(self):
        return (f"PosteriorDraws({self.spec}, chains={self.n_chains}, draws={self.n_draws}, "
                f"dim={len(self.names)})")


def _init_point(ld, rng):
    for _ in range(100):
        theta = ld.initial_point(rng)
        lp, g = ld.logp_grad(theta)
        if np.isfinite(lp):
            return theta, lp, g
    raise SamplerError("log-posterior is not finite at any of 100 jittered initial points")


def _run_chain(ld, config, seed_seq):
    # proposals far into the tails overflow harmlessly; they are rejected as divergent
    with np.errstate(all="ignore"):
        return _run_chain_inner(ld, config, seed_seq)


def _run_chain_inner(ld, config, seed_seq):
    rng = np.random.default_rng(seed_seq)
    theta, lp, g = _init_point(ld, rng)
    kernel = NUTS(ld.raw_logp_grad(), ld.dim, rng, config.max_treedepth, config.metric)
    kernel.find_reasonable_step_size(theta, lp, g)
    averager = DualAveraging(kernel.step_size, config.target_accept)
    schedule = WindowedAdaptation(config.warmup)
    dense = config.metric == "dense"
    window = _Welford(ld.dim, dense)
    for it in range(config.warmup):
        theta, lp, g, st = kernel.transition(theta, lp, g)
        kernel.step_size = averager.update(st["accept_stat"])
        if schedule.in_slow_window(it):
            window.add(theta)
        if schedule.window_closes(it):
            kernel.inv_metric = window.variance()
            window = _Welford(ld.dim, dense)
            kernel.find_reasonable_step_size(theta, lp, g)
            averager.restart(kernel.step_size)
    kernel.step_size = averager.final()

    out = np.empty((config.draws, len(ld.info.param_names())))
    keys = ("accept_stat", "n_leapfrog", "treedepth", "divergent", "energy", "lp")
    stats = {k: np.empty(config.draws) for k in keys}
    for i in range(config.draws):
        theta, lp, g, st = kernel.transition(theta, lp, g)
        out[i] = ld.constrained(theta)
        st["lp"] = lp
        for k in keys:
            stats[k][i] = st[k]
    stats["divergent"] = stats["divergent"].astype(bool)
    return out, stats, kernel.step_size, kernel.inv_metric


def _coerce(spec, data):
    if isinstance(spec, str):
        spec = parse_formula(spec)
    if not isinstance(data, Dataset):
        data = Dataset(data)
    return spec, data


def sample_posterior(spec, data, priors=None, config=None):
    """Run ``config.chains`` independent NUTS chains on the model posterior.

    Chain ``c`` draws from its own stream spawned from ``config.seed``, so
    results do not depend on ``n_jobs``.
    """
    spec, data = _coerce(spec, data)
    config = config or SamplerConfig()
    design = build_design(spec, data)
    if design.y is None:
        raise ValueError(f"data has no outcome column {spec.outcome!r}")
    priors = priors or default_priors(spec, data)
    ld = LogDensity(design, priors)
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    t0 = time.perf_counter()
    if config.n_jobs > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.n_jobs, config.chains)) as ex:
            results = list(ex.map(_run_chain, [ld] * config.chains, [config] * config.chains, seeds))
    else:
        results = [_run_chain(ld, config, s) for s in seeds]
    elapsed = time.perf_counter() - t0
    draws = np.stack([r[0] for r in results])
    stats = {k: np.stack([r[1][k] for r in results]) for k in results[0][1]}
    stats["step_size"] = np.array([r[2] for r in results])
    manifest = {
        "formula": str(spec),
        "priors": priors.to_dict(),
        "data_sha256": data.fingerprint(),
        "n_rows": data.n_rows,
        "seed": config.seed,
        "sampler": config.to_dict(),
        "version": __version__,
    }
    fit = PosteriorDraws(design.info.param_names(), draws, design.info, priors, config, stats,
                         manifest)
    # kept off the manifest so saved fits stay bit-identical across runs
    fit.elapsed_seconds = elapsed
    report = fit.diagnostics()
    if not report.ok:
        warnings.warn("; ".join(report.warnings), ConvergenceWarning, stacklevel=2)
    return fit


def prior_predictive(spec, priors, newdata, n_draws, seed=None):
    """Outcome draws ``(n_draws, n_rows)`` with parameters drawn from the priors alone."""
    spec, newdata = _coerce(spec, newdata)
    design = build_design(spec, newdata)
    info = design.info
    rng = np.random.default_rng(seed)
    for p in list(priors.beta.values()) + list(priors.group_sd.values()) + [priors.sigma]:
        if isinstance(p, Flat):
            raise ValueError("prior predictive needs proper priors; got a flat prior")
    bc = np.column_stack([priors.for_coef(n).sample(rng, n_draws) for n in info.fixed_names]) \
        if info.n_fixed else np.zeros((n_draws, 0))
    beta = bc.copy()
    if info.intercept_index is not None:
        beta[:, 0] = bc[:, 0] - bc[:, 1:] @ info.centers[1:]
    eta = beta @ design.fixed.T
    for t, idx, S, k in zip(spec.varying_terms, design.group_index, design.group_slopes,
                            design.level_counts):
        q = len(t.coef_names)
        sd = np.abs(np.asarray(priors.group_sd[t.group].sample(rng, (n_draws, q)), dtype=float))
        alpha = rng.standard_normal((n_draws, k, q)) * sd[:, None, :]
        eta += np.einsum("ij,dij->di", S, alpha[:, idx, :])
    sigma = np.asarray(priors.sigma.sample(rng, n_draws), dtype=float)
    lb, ub = spec.bounds
    return truncnorm_sample(eta, sigma[:, None], lb, ub, rng=rng)
