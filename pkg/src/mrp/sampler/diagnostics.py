"""Convergence diagnostics: rank-normalized split R-hat and bulk ESS.

Inputs are ``(chains, draws)`` arrays for a single scalar quantity.
"""
from __future__ import annotations

import numpy as np
from scipy import special, stats

__all__ = ["split_rhat", "ess", "ess_bulk", "mcse_mean", "autocovariance"]


def _as_chains(x, min_draws):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected (chains, draws) array, got shape {x.shape}")
    if x.shape[1] < min_draws:
        raise ValueError(f"need at least {min_draws} draws per chain, got {x.shape[1]}")
    return x


def _split(x):
    half = x.shape[1] // 2
    return np.vstack((x[:, :half], x[:, -half:]))


def _rank_normalize(x):
    ranks = stats.rankdata(x, method="average").reshape(x.shape)
    return special.ndtri((ranks - 0.375) / (x.size + 0.25))


def _rhat(x):
    n = x.shape[1]
    w = np.mean(np.var(x, axis=1, ddof=1))
    b_over_n = np.var(np.mean(x, axis=1), ddof=1)
    if w == 0:
        return 1.0 if b_over_n == 0 else np.inf
    return float(np.sqrt(((n - 1) / n * w + b_over_n) / w))


def split_rhat(draws, param=None):
    """Rank-normalized split R-hat (max of bulk and folded-tail versions).

    ``draws`` is a ``(chains, draws)`` array, or a :class:`PosteriorDraws`
    together with a parameter name.
    """
    x = draws.param(param) if param is not None else draws
    x = _as_chains(x, 4)
    if x.shape[0] < 2 and x.shape[1] < 4:
        raise ValueError("split R-hat needs >= 2 chains or >= 4 draws")
    if np.ptp(x) == 0:
        return 1.0
    bulk = _rhat(_rank_normalize(_split(x)))
    folded = np.abs(x - np.median(x))
    tail = _rhat(_rank_normalize(_split(folded))) if np.ptp(folded) > 0 else 1.0
    return max(bulk, tail)


def autocovariance(x):
    """Biased autocovariance of a 1-D series via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    m = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x - x.mean(), m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n]
    return acov / n


def _ess_raw(x):
    """ESS of a (chains, draws) array using Geyer's initial monotone sequence."""
    m, n = x.shape
    acov = np.array([autocovariance(c) for c in x])
    mean_var = acov[:, 0].mean() * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += np.var(x.mean(axis=1), ddof=1)
    if var_plus == 0:
        return float(m * n)
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sums of adjacent pairs, truncated at the first negative pair
    n_pairs = n // 2
    pairs = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    neg = np.flatnonzero(pairs < 0)
    k = neg[0] if neg.size else n_pairs
    pairs = np.minimum.accumulate(pairs[:k]) if k else pairs[:0]
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def ess_bulk(draws, param=None):
    """Bulk effective sample size on rank-normalized split chains."""
    x = draws.param(param) if param is not None else draws
    x = _as_chains(x, 4)
    if np.ptp(x) == 0:
        return float(x.size)
    return _ess_raw(_rank_normalize(_split(x)))


def ess(draws, param=None, method="bulk"):
    """Effective sample size; ``method`` is ``"bulk"`` or ``"mean"`` (plain split ESS)."""
    if method == "bulk":
        return ess_bulk(draws, param)
    x = draws.param(param) if param is not None else draws
    x = _as_chains(x, 4)
    if method == "mean":
        if np.ptp(x) == 0:
            return float(x.size)
        return _ess_raw(_split(x))
    raise ValueError(f"unknown ESS method {method!r}")


def mcse_mean(draws, param=None):
    """Monte-Carlo standard error of the posterior mean."""
    x = draws.param(param) if param is not None else draws
    x = _as_chains(x, 4)
    return float(np.std(x, ddof=1) / np.sqrt(ess(x, method="mean")))
