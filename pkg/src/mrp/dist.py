"""Probability kernels: truncated normal likelihood and the prior families.

All functions broadcast over numpy arrays. Truncated-normal normalizers are
computed in log space so bounds far in either tail stay finite.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "TruncNormParams",
    "truncnorm_logpdf",
    "truncnorm_logpdf_grad",
    "truncnorm_sample",
    "truncnorm_mean",
    "truncnorm_cdf",
    "log_ndtr_diff",
    "normal_logpdf",
    "Prior",
    "Normal",
    "StudentT",
    "HalfStudentT",
    "Flat",
    "Constant",
    "prior_logpdf",
    "parse_prior",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_LN2 = math.log(2.0)


def _log1mexp(x):
    """log(1 - exp(x)) for x <= 0."""
    # rounding can push x just above 0 for a near-empty interval
    x = np.minimum(np.asarray(x, dtype=float), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > -_LN2, np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


def log_ndtr_diff(a, b):
    """log(Phi(b) - Phi(a)) for a < b, stable in both tails.

    The interval is reflected so that a + b <= 0; then Phi(a) <= Phi(b) and
    log Phi(b) + log(1 - Phi(a)/Phi(b)) is free of cancellation.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    with np.errstate(invalid="ignore"):
        flip = (a + b) > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    l_hi = special.log_ndtr(hi)
    with np.errstate(invalid="ignore"):
        out = l_hi + _log1mexp(special.log_ndtr(lo) - l_hi)
    return out if out.ndim else out[()]


def normal_logpdf(x, mu=0.0, sigma=1.0):
    z = (np.asarray(x, dtype=float) - mu) / sigma
    return -0.5 * z * z - np.log(sigma) - _LOG_SQRT_2PI


def _standardize(mu, sigma, lb, ub):
    sigma = np.asarray(sigma, dtype=float)
    a = (np.asarray(lb, dtype=float) - mu) / sigma
    b = (np.asarray(ub, dtype=float) - mu) / sigma
    return a, b


def truncnorm_logpdf(x, mu=0.0, sigma=1.0, lb=-np.inf, ub=np.inf):
    """Log-density of Normal(mu, sigma) renormalized to [lb, ub].

    Returns -inf outside the support and nan where sigma <= 0 or lb >= ub.
    """
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        a, b = _standardize(mu, sigma, lb, ub)
        out = normal_logpdf(x, mu, sigma) - log_ndtr_diff(a, b)
        out = np.where((x < lb) | (x > ub), -np.inf, out)
        out = np.where((sigma > 0) & (lb < ub), out, np.nan)
    return out if out.ndim else float(out)


def truncnorm_logpdf_grad(x, mu, sigma, lb=-np.inf, ub=np.inf):
    """Log-density plus its partial derivatives in ``mu`` and ``sigma``.

    Returns ``(logp, dlogp_dmu, dlogp_dsigma)``; ``x`` is assumed to lie inside
    [lb, ub].
    """
    x = np.asarray(x, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    u = (x - mu) / sigma
    logp = -0.5 * u * u - np.log(sigma) - _LOG_SQRT_2PI
    dmu = u / sigma
    dsigma = (u * u - 1.0) / sigma
    if np.all(np.isinf(lb)) and np.all(np.isinf(ub)):
        return logp, dmu, dsigma
    a, b = _standardize(mu, sigma, lb, ub)
    logz = log_ndtr_diff(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        ra = np.exp(normal_logpdf(a) - logz)  # phi(a) / Z, 0 at a = -inf
        rb = np.exp(normal_logpdf(b) - logz)
    a_fin = np.where(np.isfinite(a), a, 0.0)
    b_fin = np.where(np.isfinite(b), b, 0.0)
    logp = logp - logz
    dmu = dmu - (ra - rb) / sigma
    dsigma = dsigma - (a_fin * ra - b_fin * rb) / sigma
    return logp, dmu, dsigma


def truncnorm_cdf(x, mu=0.0, sigma=1.0, lb=-np.inf, ub=np.inf):
    a, b = _standardize(mu, sigma, lb, ub)
    z = (np.clip(np.asarray(x, dtype=float), lb, ub) - mu) / sigma
    with np.errstate(divide="ignore"):
        return np.exp(log_ndtr_diff(a, np.maximum(z, a)) - log_ndtr_diff(a, b))


def truncnorm_mean(mu=0.0, sigma=1.0, lb=-np.inf, ub=np.inf):
    """Mean of the truncated normal, mu + sigma * (phi(a) - phi(b)) / Z."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.all(np.isinf(lb)) and np.all(np.isinf(ub)):
        return mu + 0.0 * sigma
    a, b = _standardize(mu, sigma, lb, ub)
    logz = log_ndtr_diff(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        ra = np.exp(normal_logpdf(a) - logz)
        rb = np.exp(normal_logpdf(b) - logz)
    out = np.clip(mu + sigma * (ra - rb), lb, ub)
    return out if out.ndim else float(out)


def truncnorm_sample(mu=0.0, sigma=1.0, lb=-np.inf, ub=np.inf, rng=None, size=None, u=None):
    """Inverse-CDF draw from the truncated normal.

    The standardized interval is reflected so the inversion always happens
    in the lower tail, then ``ndtri_exp`` maps log-probabilities back. ``u``
    may be supplied to reuse uniforms (common random numbers).
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    a, b = _standardize(mu, sigma, lb, ub)
    if size is not None:
        shape = size
    elif u is not None:
        shape = np.broadcast_shapes(a.shape, b.shape, np.shape(u))
    else:
        shape = np.broadcast_shapes(a.shape, b.shape)
    a = np.broadcast_to(a, shape)
    b = np.broadcast_to(b, shape)
    if u is None:
        rng = np.random.default_rng(rng)
        u = rng.random(shape)
    u = np.broadcast_to(np.asarray(u, dtype=float), shape)
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    # the u-quantile of the original is minus the (1-u)-quantile of the reflection,
    # which keeps draws monotone in u across means
    u = np.where(flip, 1.0 - u, u)
    log_lo = special.log_ndtr(lo)
    with np.errstate(divide="ignore"):
        logz = log_ndtr_diff(lo, hi)
        logp = np.logaddexp(log_lo, np.log(u) + logz)
    z = np.clip(special.ndtri_exp(np.minimum(logp, 0.0)), lo, hi)
    z = np.where(flip, -z, z)
    out = mu + sigma * z
    out = np.clip(out, lb, ub)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class TruncNormParams:
    mu: float
    sigma: float
    lb: float = -math.inf
    ub: float = math.inf

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.lb < self.ub:
            raise ValueError(f"need lb < ub, got ({self.lb}, {self.ub})")

    def logpdf(self, x):
        return truncnorm_logpdf(x, self.mu, self.sigma, self.lb, self.ub)

    def sample(self, rng=None, size=None):
        return truncnorm_sample(self.mu, self.sigma, self.lb, self.ub, rng=rng, size=size)

    def mean(self):
        return truncnorm_mean(self.mu, self.sigma, self.lb, self.ub)


# -- priors ------------------------------------------------------------------

class Prior:
    """Base class for prior families; subclasses are frozen dataclasses."""

    name = "prior"
    positive = False  # supported on [0, inf)
    fixed = False  # parameter is held constant, not sampled

    def logpdf(self, x):
        raise NotImplementedError

    def grad(self, x):
        """d logpdf / dx."""
        raise NotImplementedError

    def sample(self, rng, size=None):
        raise NotImplementedError

    def median(self):
        raise NotImplementedError

    def args(self):
        raise NotImplementedError

    def to_dict(self):
        return {"family": self.name, "args": list(self.args())}

    def __str__(self):
        return f"{self.name}({', '.join(f'{a:.6g}' for a in self.args())})"


@dataclass(frozen=True)
class Normal(Prior):
    mu: float = 0.0
    sigma: float = 1.0
    name = "normal"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"normal prior needs sigma > 0, got {self.sigma}")

    def logpdf(self, x):
        return normal_logpdf(x, self.mu, self.sigma)

    def grad(self, x):
        return -(np.asarray(x, dtype=float) - self.mu) / self.sigma**2

    def sample(self, rng, size=None):
        return rng.normal(self.mu, self.sigma, size)

    def median(self):
        return self.mu

    def args(self):
        return (self.mu, self.sigma)


def _t_logpdf(x, df, mu, sigma):
    z = (np.asarray(x, dtype=float) - mu) / sigma
    const = (special.gammaln((df + 1) / 2) - special.gammaln(df / 2)
             - 0.5 * math.log(df * math.pi) - math.log(sigma))
    return const - (df + 1) / 2 * np.log1p(z * z / df)


@dataclass(frozen=True)
class StudentT(Prior):
    df: float = 3.0
    mu: float = 0.0
    sigma: float = 1.0
    name = "student_t"

    def __post_init__(self):
        if not (self.df > 0 and self.sigma > 0):
            raise ValueError(f"student_t prior needs df, sigma > 0, got {self.df}, {self.sigma}")

    def logpdf(self, x):
        return _t_logpdf(x, self.df, self.mu, self.sigma)

    def grad(self, x):
        d = np.asarray(x, dtype=float) - self.mu
        return -(self.df + 1) * d / (self.df * self.sigma**2 + d * d)

    def sample(self, rng, size=None):
        return self.mu + self.sigma * rng.standard_t(self.df, size)

    def median(self):
        return self.mu

    def args(self):
        return (self.df, self.mu, self.sigma)


@dataclass(frozen=True)
class HalfStudentT(Prior):
    """Student-t folded at zero; density doubled on [0, inf)."""

    df: float = 3.0
    sigma: float = 1.0
    name = "half_student_t"
    positive = True

    def __post_init__(self):
        if not (self.df > 0 and self.sigma > 0):
            raise ValueError(f"half_student_t prior needs df, sigma > 0, got {self.df}, {self.sigma}")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        out = _LN2 + _t_logpdf(x, self.df, 0.0, self.sigma)
        out = np.where(x < 0, -np.inf, out)
        return out if out.ndim else float(out)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        return -(self.df + 1) * x / (self.df * self.sigma**2 + x * x)

    def sample(self, rng, size=None):
        return np.abs(self.sigma * rng.standard_t(self.df, size))

    def median(self):
        # median of |t| is the 75% quantile of t
        from scipy import stats
        return float(self.sigma * stats.t.ppf(0.75, self.df))

    def args(self):
        return (self.df, 0.0, self.sigma)


@dataclass(frozen=True)
class Flat(Prior):
    """Improper uniform prior; cannot be sampled from."""

    name = "flat"

    def logpdf(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def grad(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def sample(self, rng, size=None):
        raise ValueError("cannot draw from an improper flat prior")

    def median(self):
        return 0.0

    def args(self):
        return ()

    def __str__(self):
        return "flat()"


@dataclass(frozen=True)
class Constant(Prior):
    """Point mass: the parameter is fixed at ``value`` and excluded from sampling."""

    value: float = 1.0
    name = "constant"
    fixed = True

    def logpdf(self, x):
        return np.where(np.asarray(x, dtype=float) == self.value, 0.0, -np.inf)

    def grad(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def sample(self, rng, size=None):
        return np.full(size, float(self.value)) if size is not None else float(self.value)

    def median(self):
        return self.value

    def args(self):
        return (self.value,)


_FAMILIES = {
    "normal": Normal,
    "student_t": StudentT,
    "half_student_t": HalfStudentT,
    "flat": Flat,
    "constant": Constant,
}


def _make_prior(family, args):
    try:
        cls = _FAMILIES[family.lower()]
    except KeyError:
        raise ValueError(f"unknown prior family {family!r}; choose from {sorted(_FAMILIES)}") from None
    args = [float(a) for a in args]
    if cls is HalfStudentT:
        if len(args) == 3:
            if args[1] != 0.0:
                raise ValueError("half_student_t location must be 0")
            args = [args[0], args[2]]
    return cls(*args)


def prior_from_dict(d):
    return _make_prior(d["family"], d.get("args", ()))


def parse_prior(text):
    """Parse a prior string such as ``"normal(0, 10)"`` or ``"student_t(3, 0, 2.5)"``."""
    m = re.fullmatch(r"\s*([A-Za-z_]+)\s*\(([^)]*)\)\s*", text)
    if not m:
        raise ValueError(f"cannot parse prior {text!r}")
    args = [a for a in (s.strip() for s in m.group(2).split(",")) if a]
    return _make_prior(m.group(1), args)


def prior_logpdf(x, family, params=()):
    """Log-density of ``x`` under a prior given as an instance or a family name."""
    prior = family if isinstance(family, Prior) else _make_prior(family, params)
    out = prior.logpdf(x)
    return float(out) if np.ndim(out) == 0 else out
