"""Compiled log-posterior and gradient for :class:`mrp.model.LogDensity`.

A loop-level transcription of ``LogDensity._logp_grad_numpy``; the two are
checked against each other in the test suite.
"""
from __future__ import annotations

import math

import numba
import numpy as np

_SQRT2 = math.sqrt(2.0)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LN2 = math.log(2.0)

PRIOR_NORMAL = 0
PRIOR_T = 1
PRIOR_FLAT = 2


@numba.njit(cache=True)
def log_ndtr(z):
    if z > -1.0:
        return math.log1p(-0.5 * math.erfc(z / _SQRT2))
    if z > -30.0:
        return math.log(0.5 * math.erfc(-z / _SQRT2))
    if z == -np.inf:
        return -np.inf
    r = 1.0 / (z * z)
    series = 1.0 - r * (1.0 - r * (3.0 - r * (15.0 - 105.0 * r)))
    return -0.5 * z * z - math.log(-z) - _HALF_LOG_2PI + math.log(series)


@numba.njit(cache=True)
def _log1mexp(x):
    x = min(x, 0.0)
    if x > -_LN2:
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


@numba.njit(cache=True)
def log_ndtr_diff(a, b):
    if a + b > 0.0:
        lo, hi = -b, -a
    else:
        lo, hi = a, b
    l_hi = log_ndtr(hi)
    return l_hi + _log1mexp(log_ndtr(lo) - l_hi)


@numba.njit(cache=True)
def _trunc_terms(a, b):
    """log Z, phi(a)/Z and phi(b)/Z for Z = Phi(b) - Phi(a)."""
    if a + b > 0.0:
        lo, hi = -b, -a
    else:
        lo, hi = a, b
    # plain difference when both tails are representable and cancellation is mild
    if hi > -30.0:
        p_hi = 0.5 * math.erfc(-hi / _SQRT2)
        z = p_hi - 0.5 * math.erfc(-lo / _SQRT2)
        if z > 1e-3 * p_hi:
            logz = math.log(z)
        else:
            logz = log_ndtr_diff(a, b)
    else:
        logz = log_ndtr_diff(a, b)
    ra = 0.0 if math.isinf(a) else math.exp(-0.5 * a * a - _HALF_LOG_2PI - logz)
    rb = 0.0 if math.isinf(b) else math.exp(-0.5 * b * b - _HALF_LOG_2PI - logz)
    return logz, ra, rb


@numba.njit(cache=True)
def logp_grad(theta, Xc, y, lb, ub, beta_free_idx, beta_fixed_vals,
              t_centered, t_pos, t_sdpos, t_k, t_q, t_soff, t_aoff, t_sdfixed,
              gidx, S, sigma_pos, sigma_fixed, log_pos,
              pv_kind, pv_mu, pv_scale, pv_df, pv_const):
    dim = theta.shape[0]
    n, p = Xc.shape
    nb = beta_free_idx.shape[0]
    n_terms = t_pos.shape[0]
    grad = np.zeros(dim)

    bc = beta_fixed_vals.copy()
    for j in range(nb):
        bc[beta_free_idx[j]] = theta[j]
    n_log = log_pos.shape[0]
    ex = np.empty(n_log)
    for m in range(n_log):
        ex[m] = math.exp(theta[log_pos[m]])

    n_alpha = 0
    for t in range(n_terms):
        n_alpha += t_k[t] * t_q[t]
    alpha = np.empty(n_alpha)
    e = 0
    for t in range(n_terms):
        k, q, pos, off = t_k[t], t_q[t], t_pos[t], t_aoff[t]
        if t_centered[t]:
            for m in range(k * q):
                alpha[off + m] = theta[pos + m]
        else:
            for lv in range(k):
                for c in range(q):
                    alpha[off + lv * q + c] = theta[pos + lv * q + c] * ex[e + c]
            e += q
    sigma = ex[n_log - 1] if sigma_pos >= 0 else sigma_fixed

    lp = 0.0
    d_sigma = 0.0
    d_alpha = np.zeros(n_alpha)
    g_beta = np.zeros(p)
    truncated = not (math.isinf(lb) and math.isinf(ub))
    log_sigma = math.log(sigma)
    for i in range(n):
        eta = 0.0
        for j in range(p):
            eta += Xc[i, j] * bc[j]
        for t in range(n_terms):
            base = t_aoff[t] + gidx[i, t] * t_q[t]
            for c in range(t_q[t]):
                eta += S[i, t_soff[t] + c] * alpha[base + c]
        u = (y[i] - eta) / sigma
        ll = -0.5 * u * u - log_sigma - _HALF_LOG_2PI
        dmu = u / sigma
        ds = (u * u - 1.0) / sigma
        if truncated:
            a = (lb - eta) / sigma
            b = (ub - eta) / sigma
            logz, ra, rb = _trunc_terms(a, b)
            a_fin = 0.0 if math.isinf(a) else a
            b_fin = 0.0 if math.isinf(b) else b
            ll -= logz
            dmu -= (ra - rb) / sigma
            ds -= (a_fin * ra - b_fin * rb) / sigma
        lp += ll
        d_sigma += ds
        for j in range(p):
            g_beta[j] += Xc[i, j] * dmu
        for t in range(n_terms):
            base = t_aoff[t] + gidx[i, t] * t_q[t]
            for c in range(t_q[t]):
                d_alpha[base + c] += S[i, t_soff[t] + c] * dmu

    # scalar priors: free coefficients, then the sampled scales
    n_pv = pv_kind.shape[0]
    pg = np.zeros(n_pv)
    for m in range(n_pv):
        x = theta[m] if m < nb else ex[m - nb]
        kind = pv_kind[m]
        if kind == PRIOR_FLAT:
            continue
        d = x - pv_mu[m]
        s = pv_scale[m]
        if kind == PRIOR_NORMAL:
            lp += pv_const[m] - 0.5 * (d / s) ** 2
            pg[m] = -d / (s * s)
        else:
            nu = pv_df[m]
            lp += pv_const[m] - 0.5 * (nu + 1.0) * math.log1p((d / s) ** 2 / nu)
            pg[m] = -(nu + 1.0) * d / (nu * s * s + d * d)
    for j in range(nb):
        grad[j] = g_beta[beta_free_idx[j]] + pg[j]
    for m in range(n_log):
        lp += theta[log_pos[m]]

    e = 0
    for t in range(n_terms):
        k, q, pos, off = t_k[t], t_q[t], t_pos[t], t_aoff[t]
        if t_centered[t]:
            sd = t_sdfixed[t]
            for m in range(k * q):
                a = alpha[off + m]
                lp += -0.5 * a * a / (sd * sd) - math.log(sd) - _HALF_LOG_2PI
                grad[pos + m] = d_alpha[off + m] - a / (sd * sd)
        else:
            for c in range(q):
                acc = 0.0
                for lv in range(k):
                    m = lv * q + c
                    z = theta[pos + m]
                    lp += -0.5 * z * z - _HALF_LOG_2PI
                    grad[pos + m] = d_alpha[off + m] * ex[e + c] - z
                    acc += d_alpha[off + m] * alpha[off + m]
                # d alpha / d log sd = alpha, plus prior term and log-Jacobian
                grad[t_sdpos[t] + c] = acc + pg[nb + e + c] * ex[e + c] + 1.0
            e += q
    if sigma_pos >= 0:
        grad[sigma_pos] = d_sigma * sigma + pg[n_pv - 1] * sigma + 1.0

    if not math.isfinite(lp):
        return -np.inf, np.zeros(dim)
    for m in range(dim):
        if not math.isfinite(grad[m]):
            return -np.inf, np.zeros(dim)
    return lp, grad
