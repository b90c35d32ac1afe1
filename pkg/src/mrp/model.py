"""Design matrices, priors and the joint log-posterior of the multilevel model.

The linear predictor for row ``i`` is::

    eta_i = X_i . beta + sum_t  S_t[i] . alpha_t[g_t(i)]

where each varying term ``t`` has a group index ``g_t``, slope covariates
``S_t`` (a column of ones for the intercept, then the slope columns) and
group effects ``alpha_t ~ Normal(0, sd_t)`` column-wise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernel
from .data import CATEGORICAL, NUMERIC, DataError, Dataset
from .dist import (Constant, Flat, HalfStudentT, Normal, Prior, StudentT, normal_logpdf,
                   prior_from_dict, truncnorm_logpdf, truncnorm_logpdf_grad)
from .formula import ModelSpec, parse_formula

__all__ = [
    "DesignInfo",
    "DesignMatrices",
    "Parameters",
    "PriorSet",
    "LogDensity",
    "build_design",
    "default_priors",
    "log_posterior",
    "linear_predictor",
]


_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class FixedColumn:
    name: str  # coefficient label
    source: str | None  # data column; None for the intercept
    level: str | None = None  # indicator level for categorical sources


@dataclass
class DesignInfo:
    """Encoding learned from training data, reused to encode new data."""

    spec: ModelSpec
    fixed: list
    group_levels: list
    centers: np.ndarray  # training means of the fixed columns (0 for the intercept)
    fixed_levels: dict = field(default_factory=dict)  # categorical constant-effect columns

    @property
    def fixed_names(self):
        return [c.name for c in self.fixed]

    @property
    def n_fixed(self):
        return len(self.fixed)

    @property
    def intercept_index(self):
        return 0 if self.spec.intercept else None

    def param_names(self):
        """Labels of the reported (constrained) parameters, in storage order."""
        names = [f"b_{n}" for n in self.fixed_names]
        for t in self.spec.varying_terms:
            names += [f"sd_{t.group}__{c}" for c in t.coef_names]
        for t, levels in zip(self.spec.varying_terms, self.group_levels):
            names += [f"r_{t.group}[{lv},{c}]" for lv in levels for c in t.coef_names]
        names.append("sigma")
        return names

    def split(self, flat):
        """Structured views of reported draws ``(..., dim)``."""
        flat = np.asarray(flat, dtype=float)
        lead = flat.shape[:-1]
        p = self.n_fixed
        out = {"beta": flat[..., :p]}
        pos = p
        sds = []
        for t in self.spec.varying_terms:
            q = len(t.coef_names)
            sds.append(flat[..., pos:pos + q])
            pos += q
        rs = []
        for t, levels in zip(self.spec.varying_terms, self.group_levels):
            q = len(t.coef_names)
            k = len(levels)
            rs.append(flat[..., pos:pos + k * q].reshape(lead + (k, q)))
            pos += k * q
        out["sd"] = sds
        out["r"] = rs
        out["sigma"] = flat[..., pos]
        return out

    def to_dict(self):
        return {
            "formula": str(self.spec),
            "fixed": [[c.name, c.source, c.level] for c in self.fixed],
            "group_levels": [list(lv) for lv in self.group_levels],
            "centers": [float(c) for c in self.centers],
            "fixed_levels": {k: list(v) for k, v in self.fixed_levels.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            spec=parse_formula(d["formula"]),
            fixed=[FixedColumn(*c) for c in d["fixed"]],
            group_levels=[list(lv) for lv in d["group_levels"]],
            centers=np.asarray(d["centers"], dtype=float),
            fixed_levels={k: list(v) for k, v in d.get("fixed_levels", {}).items()},
        )


@dataclass
class DesignMatrices:
    fixed: np.ndarray  # n x p, intercept first when present
    group_index: list  # per term, n-vector of level codes; -1 = level unknown to the model
    group_slopes: list  # per term, n x q, first column ones
    level_counts: list
    info: DesignInfo
    y: np.ndarray | None = None

    @property
    def n_rows(self):
        return self.fixed.shape[0]


def _require(data, col):
    if col not in data:
        raise DataError(f"missing column {col!r}")


def build_design(spec, data, info=None):
    """Encode ``data`` for ``spec``.

    Categorical constant-effect columns become indicators for every level but
    the first, except that the first such column of a model without an
    intercept keeps all of its levels. Group levels come from the Dataset's declared level list, so a
    declared-but-unobserved level still gets an index. When ``info`` from a
    previous fit is passed, that encoding is reused and group levels it does
    not know map to -1.
    """
    if isinstance(spec, str):
        spec = parse_formula(spec)
    if not isinstance(data, Dataset):
        data = Dataset(data)
    for col in spec.predictors:
        _require(data, col)
    for t in spec.varying_terms:
        if data.kind(t.group) != CATEGORICAL:
            raise DataError(f"grouping factor {t.group!r} must be categorical, not numeric")
        for s in t.slopes:
            if data.kind(s) != NUMERIC:
                raise DataError(f"varying slope {s!r} must be a numeric column")
    n = data.n_rows

    if info is None:
        fixed = []
        if spec.intercept:
            fixed.append(FixedColumn("Intercept", None))
        # without an intercept the first categorical term keeps its reference level
        full_rank_done = spec.intercept
        for col in spec.fixed_terms:
            if data.kind(col) == NUMERIC:
                fixed.append(FixedColumn(col, col))
            else:
                levels = data.levels(col) if not full_rank_done else data.levels(col)[1:]
                full_rank_done = True
                for lv in levels:
                    fixed.append(FixedColumn(f"{col}[{lv}]", col, lv))
        group_levels = [data.levels(t.group) for t in spec.varying_terms]
    else:
        fixed = info.fixed
        group_levels = info.group_levels

    X = np.empty((n, len(fixed)))
    for j, c in enumerate(fixed):
        if c.source is None:
            X[:, j] = 1.0
        elif c.level is None:
            if data.kind(c.source) != NUMERIC:
                raise DataError(f"column {c.source!r} must be numeric")
            X[:, j] = data.numeric(c.source)
        else:
            if data.kind(c.source) != CATEGORICAL:
                raise DataError(f"column {c.source!r} must be categorical")
            X[:, j] = (data.values(c.source) == c.level).astype(float)
    if info is not None:
        for col, known in info.fixed_levels.items():
            bad = sorted(set(data.values(col)) - set(known))
            if bad:
                raise DataError(f"levels {bad} of {col!r} were not seen when the model was fit")

    if info is None:
        # centering is only a reparameterization when an intercept absorbs the shift
        centers = np.zeros(len(fixed))
        if n and spec.intercept:
            centers = X.mean(axis=0)
            centers[0] = 0.0
        fixed_levels = {c: data.levels(c) for c in spec.fixed_terms if data.kind(c) == CATEGORICAL}
        info = DesignInfo(spec, fixed, group_levels, centers, fixed_levels)

    index, slopes = [], []
    for t, levels in zip(spec.varying_terms, group_levels):
        index.append(data.codes(t.group, levels))
        S = np.ones((n, 1 + len(t.slopes)))
        for j, s in enumerate(t.slopes):
            S[:, j + 1] = data.numeric(s)
        slopes.append(S)

    y = None
    if spec.outcome in data:
        y = data.numeric(spec.outcome)
        lb, ub = spec.bounds
        if np.any((y < lb) | (y > ub)):
            raise DataError(f"outcome {spec.outcome!r} has values outside truncation bounds ({lb}, {ub})")
    return DesignMatrices(X, index, slopes, [len(lv) for lv in group_levels], info, y)


@dataclass
class Parameters:
    beta: np.ndarray
    group_effects: list = field(default_factory=list)  # per term, K x q
    group_sd: list = field(default_factory=list)  # per term, q
    sigma_y: float = 1.0

    def flatten(self):
        parts = [np.asarray(self.beta, float)]
        parts += [np.asarray(s, float).ravel() for s in self.group_sd]
        parts += [np.asarray(a, float).ravel() for a in self.group_effects]
        parts.append(np.array([self.sigma_y], float))
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, flat, info):
        d = info.split(flat)
        return cls(d["beta"].copy(), [r.copy() for r in d["r"]], [s.copy() for s in d["sd"]],
                   float(d["sigma"]))


@dataclass
class PriorSet:
    """Priors keyed by coefficient name (``beta``) and grouping factor (``group_sd``).

    The ``Intercept`` prior applies to the intercept at the training means of
    the other constant-effect columns.
    """

    beta: dict
    group_sd: dict
    sigma: Prior

    def for_coef(self, name):
        try:
            return self.beta[name]
        except KeyError:
            raise KeyError(f"no prior for coefficient {name!r}") from None

    def with_beta(self, prior, include_intercept=False):
        beta = {k: (v if k == "Intercept" and not include_intercept else prior)
                for k, v in self.beta.items()}
        return PriorSet(beta, dict(self.group_sd), self.sigma)

    def replace(self, beta=None, group_sd=None, sigma=None):
        return PriorSet({**self.beta, **(beta or {})}, {**self.group_sd, **(group_sd or {})},
                        sigma if sigma is not None else self.sigma)

    def to_dict(self):
        return {
            "beta": {k: v.to_dict() for k, v in self.beta.items()},
            "group_sd": {k: v.to_dict() for k, v in self.group_sd.items()},
            "sigma": self.sigma.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls({k: prior_from_dict(v) for k, v in d["beta"].items()},
                   {k: prior_from_dict(v) for k, v in d["group_sd"].items()},
                   prior_from_dict(d["sigma"]))

    def __str__(self):
        lines = [f"b[{k}] ~ {v}" for k, v in self.beta.items()]
        lines += [f"sd[{k}] ~ {v}" for k, v in self.group_sd.items()]
        lines.append(f"sigma ~ {self.sigma}")
        return "\n".join(lines)


def _mad(y):
    return 1.4826 * float(np.median(np.abs(y - np.median(y))))


def default_priors(spec, data):
    """Data-scaled default priors.

    Intercept ``student_t(3, median(y), 2.5 * mad(y))``; other coefficients
    ``normal(0, 10 * sd(y))``; group and residual scales
    ``half_student_t(3, 0, 2.5 * mad(y))``. ``mad`` is scaled by 1.4826 and
    falls back to ``sd`` when it is zero.
    """
    if isinstance(spec, str):
        spec = parse_formula(spec)
    if not isinstance(data, Dataset):
        data = Dataset(data)
    _require(data, spec.outcome)
    y = data.numeric(spec.outcome)
    if y.size < 2 or np.ptp(y) == 0:
        raise DataError(f"outcome {spec.outcome!r} is constant; cannot scale default priors")
    sd = float(np.std(y, ddof=1))
    mad = _mad(y) or sd
    names = build_design(spec, data).info.fixed_names
    beta = {}
    for name in names:
        if name == "Intercept":
            beta[name] = StudentT(3.0, float(np.median(y)), 2.5 * mad)
        else:
            beta[name] = Normal(0.0, 10.0 * sd)
    scale = HalfStudentT(3.0, 2.5 * mad)
    return PriorSet(beta, {g: scale for g in spec.groups}, scale)


def _check_priors(priors, info):
    for name in info.fixed_names:
        priors.for_coef(name)
    for g in info.spec.groups:
        if g not in priors.group_sd:
            raise KeyError(f"no group sd prior for {g!r}")
        p = priors.group_sd[g]
        if not (p.positive or p.fixed):
            raise ValueError(f"group sd prior for {g!r} must be positive or constant, got {p}")
    if not (priors.sigma.positive or priors.sigma.fixed):
        raise ValueError(f"sigma prior must be positive or constant, got {priors.sigma}")


def linear_predictor(design, beta, group_effects):
    """eta for one parameter set (beta: p, group_effects: list of K x q)."""
    eta = design.fixed @ beta
    for idx, S, alpha in zip(design.group_index, design.group_slopes, group_effects):
        eta = eta + np.einsum("ij,ij->i", S, alpha[idx])
    return eta


def _centered_beta(beta, info):
    beta = np.asarray(beta, dtype=float)
    if info.intercept_index is None:
        return beta
    bc = beta.copy()
    bc[0] = beta[0] + beta[1:] @ info.centers[1:]
    return bc


def log_posterior(params, design, spec=None, priors=None):
    """Joint log-density of ``params`` (constrained scale, no Jacobians).

    Truncated-normal likelihood + Normal(0, sd) hierarchy on every group effect
    + priors. Returns -inf outside the support.
    """
    info = design.info
    spec = spec or info.spec
    if priors is None:
        raise ValueError("priors are required")
    beta = np.asarray(params.beta, dtype=float)
    if beta.shape != (info.n_fixed,):
        raise ValueError(f"beta has shape {beta.shape}, expected ({info.n_fixed},)")
    for a, sd, t, k in zip(params.group_effects, params.group_sd, spec.varying_terms,
                           design.level_counts):
        q = len(t.coef_names)
        if np.shape(a) != (k, q) or np.shape(sd) != (q,):
            raise ValueError(f"group term ({t.group}) parameters have the wrong shape")
    sigma = float(params.sigma_y)
    if not sigma > 0 or any(np.any(np.asarray(s) <= 0) for s in params.group_sd):
        return -np.inf

    lp = 0.0
    if design.n_rows:
        if design.y is None:
            raise ValueError("design has no outcome")
        eta = linear_predictor(design, beta, params.group_effects)
        lb, ub = spec.bounds
        lp += float(np.sum(truncnorm_logpdf(design.y, eta, sigma, lb, ub)))
    for a, sd in zip(params.group_effects, params.group_sd):
        lp += float(np.sum(normal_logpdf(np.asarray(a), 0.0, np.asarray(sd)[None, :])))
    bc = _centered_beta(beta, info)
    for name, b in zip(info.fixed_names, bc):
        lp += float(priors.for_coef(name).logpdf(b))
    for g, sd in zip(spec.groups, params.group_sd):
        lp += float(np.sum(priors.group_sd[g].logpdf(np.asarray(sd))))
    lp += float(priors.sigma.logpdf(sigma))
    return lp if np.isfinite(lp) else -np.inf


class _PriorVector:
    """Vectorized log-density/gradient for a list of scalar priors."""

    def __init__(self, priors):
        self.n = len(priors)
        self.mu = np.zeros(self.n)
        self.scale = np.ones(self.n)
        self.df = np.ones(self.n)
        self.const = np.zeros(self.n)
        self.is_t = np.zeros(self.n, dtype=bool)
        self.is_flat = np.zeros(self.n, dtype=bool)
        for i, p in enumerate(priors):
            if isinstance(p, Normal):
                self.mu[i], self.scale[i] = p.mu, p.sigma
                self.const[i] = float(p.logpdf(p.mu))
            elif isinstance(p, (StudentT, HalfStudentT)):
                self.is_t[i] = True
                self.mu[i] = getattr(p, "mu", 0.0)
                self.scale[i], self.df[i] = p.sigma, p.df
                self.const[i] = float(p.logpdf(self.mu[i]))
            elif isinstance(p, Flat):
                self.is_flat[i] = True
            else:
                raise TypeError(f"unsupported prior in sampled block: {p}")
        self.any_t = bool(self.is_t.any())

    def __call__(self, x):
        d = x - self.mu
        z2 = (d / self.scale) ** 2
        lp = self.const - 0.5 * z2
        g = -d / self.scale**2
        if self.any_t:
            lp = np.where(self.is_t, self.const - 0.5 * (self.df + 1) * np.log1p(z2 / self.df), lp)
            g = np.where(self.is_t, -(self.df + 1) * d / (self.df * self.scale**2 + d * d), g)
        lp = np.where(self.is_flat, 0.0, lp)
        g = np.where(self.is_flat, 0.0, g)
        return float(lp.sum()), g


class LogDensity:
    """Log-posterior on an unconstrained vector, with its gradient.

    Layout of the unconstrained vector::

        [free constant-effect coefficients (intercept centered)]
        per varying term: z (K*q) and log sd (q)       -- when sd is sampled
                          alpha (K*q)                  -- when sd is a Constant
        [log sigma]                                    -- unless sigma is a Constant

    Group effects are non-centered (alpha = sd * z) whenever their scale is
    sampled. Log-Jacobians of the log transforms are included.
    """

    def __init__(self, design, priors):
        self.design = design
        self.info = design.info
        self.spec = self.info.spec
        self.priors = priors
        _check_priors(priors, self.info)
        if design.n_rows and design.y is None:
            raise ValueError("design has no outcome column")
        if any(np.any(idx < 0) for idx in design.group_index):
            raise ValueError("training design contains unknown group levels")
        self.bounds = self.spec.bounds
        self.Xc = design.fixed - self.info.centers[None, :]
        self.beta_priors = [priors.for_coef(n) for n in self.info.fixed_names]
        self.beta_free = np.array([not p.fixed for p in self.beta_priors], dtype=bool)
        self.nb = int(self.beta_free.sum())
        self.beta_fixed_vals = np.array([p.value if p.fixed else 0.0 for p in self.beta_priors])
        self.sd_priors = [priors.group_sd[g] for g in self.spec.groups]
        self.sigma_prior = priors.sigma

        names = [f"b_{n}" for n, free in zip(self.info.fixed_names, self.beta_free) if free]
        vec_priors = [p for p, f in zip(self.beta_priors, self.beta_free) if f]
        self._blocks = []
        pos = self.nb
        for t, levels, sp, idx, S in zip(self.spec.varying_terms, self.info.group_levels,
                                         self.sd_priors, design.group_index, design.group_slopes):
            q, k = len(t.coef_names), len(levels)
            flat_idx = (idx[:, None] * q + np.arange(q)[None, :]).ravel()
            if sp.fixed:
                self._blocks.append(("centered", pos, None, k, q, idx, S, flat_idx))
                names += [f"r_{t.group}[{lv},{c}]" for lv in levels for c in t.coef_names]
                pos += k * q
            else:
                self._blocks.append(("noncentered", pos, pos + k * q, k, q, idx, S, flat_idx))
                names += [f"z_{t.group}[{lv},{c}]" for lv in levels for c in t.coef_names]
                names += [f"log_sd_{t.group}__{c}" for c in t.coef_names]
                vec_priors += [sp] * q
                pos += k * q + q
        self.sigma_pos = None
        if not self.sigma_prior.fixed:
            self.sigma_pos = pos
            names.append("log_sigma")
            vec_priors.append(self.sigma_prior)
            pos += 1
        self.dim = pos
        self.names = names
        self._prior_vec = _PriorVector(vec_priors)
        # positions in the unconstrained vector that are log-transformed scales
        logpos = [np.arange(b[2], b[2] + b[4]) for b in self._blocks if b[0] == "noncentered"]
        if self.sigma_pos is not None:
            logpos.append(np.array([self.sigma_pos]))
        self._log_pos = np.concatenate(logpos).astype(int) if logpos else np.zeros(0, int)
        self._z_pos = np.concatenate(
            [np.arange(b[1], b[1] + b[3] * b[4]) for b in self._blocks if b[0] == "noncentered"]
            or [np.zeros(0, int)]).astype(int)
        self._kargs = self._kernel_args()

    def _kernel_args(self):
        d = self.design
        n = d.n_rows
        blocks = self._blocks
        i64 = np.int64
        q = np.array([b[4] for b in blocks], dtype=i64)
        k = np.array([b[3] for b in blocks], dtype=i64)
        pv = self._prior_vec
        kind = np.where(pv.is_flat, 2, np.where(pv.is_t, 1, 0)).astype(i64)
        return (
            np.ascontiguousarray(self.Xc, dtype=float),
            np.asarray(d.y if d.y is not None else np.zeros(0), dtype=float),
            float(self.bounds[0]), float(self.bounds[1]),
            np.flatnonzero(self.beta_free).astype(i64),
            self.beta_fixed_vals.astype(float),
            np.array([b[0] == "centered" for b in blocks], dtype=np.bool_),
            np.array([b[1] for b in blocks], dtype=i64),
            np.array([b[2] if b[2] is not None else -1 for b in blocks], dtype=i64),
            k, q,
            np.concatenate(([0], np.cumsum(q)[:-1])).astype(i64) if len(q) else q,
            np.concatenate(([0], np.cumsum(k * q)[:-1])).astype(i64) if len(q) else q,
            np.array([float(sp.value) if sp.fixed else 1.0 for sp in self.sd_priors]),
            (np.column_stack(d.group_index).astype(i64) if blocks else np.zeros((n, 0), i64)),
            (np.ascontiguousarray(np.column_stack(d.group_slopes), dtype=float) if blocks
             else np.zeros((n, 0))),
            i64(self.sigma_pos if self.sigma_pos is not None else -1),
            float(self.sigma_prior.value) if self.sigma_prior.fixed else 1.0,
            self._log_pos.astype(i64),
            kind, pv.mu.astype(float), pv.scale.astype(float), pv.df.astype(float),
            pv.const.astype(float),
        )

    # -- transforms ----------------------------------------------------------

    def _beta(self, theta):
        bc = self.beta_fixed_vals.copy()
        bc[self.beta_free] = theta[:self.nb]
        return bc

    def unpack(self, theta):
        """Unconstrained vector -> :class:`Parameters` (raw-scale intercept)."""
        theta = np.asarray(theta, dtype=float)
        bc = self._beta(theta)
        beta = bc.copy()
        if self.info.intercept_index is not None:
            beta[0] = bc[0] - bc[1:] @ self.info.centers[1:]
        effects, sds = [], []
        for (kind, pos, sd_pos, k, q, *_), sp in zip(self._blocks, self.sd_priors):
            if kind == "centered":
                effects.append(theta[pos:pos + k * q].reshape(k, q))
                sds.append(np.full(q, float(sp.value)))
            else:
                sd = np.exp(theta[sd_pos:sd_pos + q])
                effects.append(theta[pos:pos + k * q].reshape(k, q) * sd[None, :])
                sds.append(sd)
        sigma = float(np.exp(theta[self.sigma_pos])) if self.sigma_pos is not None \
            else float(self.sigma_prior.value)
        return Parameters(beta, effects, sds, sigma)

    def constrained(self, theta):
        return self.unpack(theta).flatten()

    def constrained_many(self, thetas):
        return np.stack([self.constrained(t) for t in thetas]) if len(thetas) else \
            np.zeros((0, len(self.info.param_names())))

    def initial_point(self, rng, jitter=2.0):
        """Prior medians (data median for a flat intercept), jittered uniformly."""
        theta = np.zeros(self.dim)
        free = [(n, p) for n, p, f in zip(self.info.fixed_names, self.beta_priors, self.beta_free) if f]
        y = self.design.y
        for j, (name, p) in enumerate(free):
            if isinstance(p, Flat):
                theta[j] = float(np.median(y)) if name == "Intercept" and self.design.n_rows else 0.0
            else:
                theta[j] = p.median()
        for (kind, pos, sd_pos, k, q, *_), sp in zip(self._blocks, self.sd_priors):
            if kind == "noncentered":
                theta[sd_pos:sd_pos + q] = 0.0 if isinstance(sp, Flat) else np.log(sp.median())
        if self.sigma_pos is not None:
            p = self.sigma_prior
            if isinstance(p, Flat):
                theta[self.sigma_pos] = np.log(np.std(y)) if self.design.n_rows > 1 else 0.0
            else:
                theta[self.sigma_pos] = np.log(p.median())
        return theta + rng.uniform(-jitter, jitter, self.dim)

    # -- density ---------------------------------------------------------------

    def __call__(self, theta):
        return self.logp_grad(theta)[0]

    def logp_grad(self, theta):
        return _kernel.logp_grad(np.asarray(theta, dtype=float), *self._kargs)

    def raw_logp_grad(self):
        """Unchecked ``logp_grad`` for float64 vectors, for the sampler's inner loop."""
        fn, args = _kernel.logp_grad, self._kargs
        return lambda theta: fn(theta, *args)

    def _logp_grad_numpy(self, theta):
        """Reference implementation of :meth:`logp_grad`."""
        theta = np.asarray(theta, dtype=float)
        grad = np.zeros(self.dim)
        bc = self._beta(theta)
        d = self.design
        ex = np.exp(theta[self._log_pos])  # constrained scales, same order as _log_pos
        effects = []
        sds = []
        e_pos = 0
        for kind, pos, sd_pos, k, q, *_ in self._blocks:
            raw = theta[pos:pos + k * q].reshape(k, q)
            if kind == "centered":
                effects.append(raw)
                sds.append(None)
            else:
                sd = ex[e_pos:e_pos + q]
                e_pos += q
                effects.append(raw * sd)
                sds.append(sd)
        sigma = ex[-1] if self.sigma_pos is not None else float(self.sigma_prior.value)

        lp = 0.0
        d_sigma = 0.0
        d_alpha = []
        if d.n_rows:
            eta = self.Xc @ bc
            for (*_, idx, S, _fi), a in zip(self._blocks, effects):
                eta = eta + (S * a[idx]).sum(axis=1)
            lb, ub = self.bounds
            ll, g_eta, g_sig = truncnorm_logpdf_grad(d.y, eta, sigma, lb, ub)
            lp += float(ll.sum())
            d_sigma = float(g_sig.sum())
            grad[:self.nb] = (self.Xc.T @ g_eta)[self.beta_free]
            for kind, pos, sd_pos, k, q, idx, S, flat_idx in self._blocks:
                w = (g_eta[:, None] * S).ravel()
                d_alpha.append(np.bincount(flat_idx, weights=w, minlength=k * q).reshape(k, q))
        else:
            d_alpha = [np.zeros((b[3], b[4])) for b in self._blocks]

        # constant-effect, group-scale and sigma priors in one pass
        vec = np.concatenate((bc[self.beta_free], ex))
        plp, pg = self._prior_vec(vec)
        lp += plp
        grad[:self.nb] += pg[:self.nb]
        g_scale = pg[self.nb:] * ex + 1.0  # chain rule through exp, plus log-Jacobian
        lp += float(theta[self._log_pos].sum())

        e_pos = 0
        for t, ((kind, pos, sd_pos, k, q, *_), sp) in enumerate(zip(self._blocks, self.sd_priors)):
            if kind == "centered":
                sd_val = float(sp.value)
                a = effects[t]
                lp += float(-0.5 * np.sum(a * a) / sd_val**2) - a.size * (np.log(sd_val) + _HALF_LOG_2PI)
                grad[pos:pos + k * q] = (d_alpha[t] - a / sd_val**2).ravel()
            else:
                z = theta[pos:pos + k * q].reshape(k, q)
                lp += float(-0.5 * np.sum(z * z)) - z.size * _HALF_LOG_2PI
                grad[pos:pos + k * q] = (d_alpha[t] * sds[t] - z).ravel()
                # alpha = sd * z, so d alpha / d log sd = alpha
                grad[sd_pos:sd_pos + q] = np.sum(d_alpha[t] * effects[t], axis=0) + g_scale[e_pos:e_pos + q]
                e_pos += q
        if self.sigma_pos is not None:
            grad[self.sigma_pos] = d_sigma * sigma + g_scale[-1]
        if not np.isfinite(lp) or not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros(self.dim)
        return lp, grad
