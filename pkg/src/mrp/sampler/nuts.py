"""No-U-Turn sampler with multinomial trajectory sampling and windowed adaptation.

The transition follows the Stan formulation: the trajectory doubles in a
random direction, states within a subtree are sampled in proportion to
exp(-H), the newest subtree is preferred (biased progressive sampling), and
the generalized U-turn criterion is checked on every merged subtree.
Warmup adapts a step size by dual averaging and an inverse metric (diagonal
or dense) from draws in doubling windows.
"""
from __future__ import annotations

import math

import numpy as np

__all__ = ["NUTS", "DualAveraging", "WindowedAdaptation", "MAX_DELTA_H"]

MAX_DELTA_H = 1000.0


class _Point:
    __slots__ = ("x", "p", "g", "lp")

    def __init__(self, x, p, g, lp):
        self.x = x
        self.p = p
        self.g = g
        self.lp = lp

    def copy(self):
        return _Point(self.x, self.p, self.g, self.lp)


class NUTS:
    """One chain's transition kernel.

    Parameters
    ----------
    logp_grad : callable
        theta -> (log density, gradient).
    dim : int
    rng : numpy.random.Generator
    max_treedepth : int
    metric : {"diag", "dense"}
        Shape of the inverse metric: a vector of variances or a covariance matrix.
    """

    def __init__(self, logp_grad, dim, rng, max_treedepth=10, metric="diag"):
        if metric not in ("diag", "dense"):
            raise ValueError(f"metric must be 'diag' or 'dense', got {metric!r}")
        self.logp_grad = logp_grad
        self.dim = dim
        self.rng = rng
        self.max_treedepth = max_treedepth
        self.step_size = 1.0
        self.metric = metric
        self.inv_metric = np.ones(dim) if metric == "diag" else np.eye(dim)

    @property
    def inv_metric(self):
        return self._inv_metric

    @inv_metric.setter
    def inv_metric(self, value):
        value = np.asarray(value, dtype=float)
        if self.metric == "dense":
            # momentum ~ N(0, inv_metric^-1): p = L^-T z with inv_metric = L L^T
            self._chol = np.linalg.cholesky(value)
        self._inv_metric = value

    # -- helpers ----------------------------------------------------------------

    def _sharp(self, p):
        if self.metric == "dense":
            return self._inv_metric @ p
        return self._inv_metric * p

    def _leapfrog(self, z, eps):
        p = z.p + 0.5 * eps * z.g
        x = z.x + eps * self._sharp(p)
        lp, g = self.logp_grad(x)
        p = p + 0.5 * eps * g
        return _Point(x, p, g, lp)

    def _hamiltonian(self, z):
        return -z.lp + 0.5 * float(np.dot(z.p, self._sharp(z.p)))

    def sample_momentum(self):
        z = self.rng.standard_normal(self.dim)
        if self.metric == "dense":
            return np.linalg.solve(self._chol.T, z)
        return z / np.sqrt(self._inv_metric)

    def find_reasonable_step_size(self, x, lp, g):
        """Double or halve the step size until one leapfrog crosses 80% acceptance."""
        eps = self.step_size
        z0 = _Point(x, self.sample_momentum(), g, lp)
        h0 = self._hamiltonian(z0)
        z = self._leapfrog(z0, eps)
        delta = h0 - self._hamiltonian(z)
        if not np.isfinite(delta):
            delta = -np.inf
        direction = 1 if delta > math.log(0.8) else -1
        for _ in range(100):
            z0 = _Point(x, self.sample_momentum(), g, lp)
            h0 = self._hamiltonian(z0)
            z = self._leapfrog(z0, eps)
            delta = h0 - self._hamiltonian(z)
            if not np.isfinite(delta):
                delta = -np.inf
            if direction == 1 and not delta > math.log(0.8):
                break
            if direction == -1 and not delta < math.log(0.8):
                break
            eps = eps * 2.0 if direction == 1 else eps / 2.0
            if eps > 1e7 or eps < 1e-10:
                break
        self.step_size = eps
        return eps

    @staticmethod
    def _uturn_free(p_sharp_minus, p_sharp_plus, rho):
        return float(np.dot(p_sharp_plus, rho)) > 0 and float(np.dot(p_sharp_minus, rho)) > 0

    # -- tree building ----------------------------------------------------------

    def _build_tree(self, depth, z, direction, h0, acc):
        """Extend from ``z`` by 2**depth leapfrog steps.

        Returns ``(valid, z_end, proposal, log_sum_weight, rho, p_sharp_beg,
        p_sharp_end, p_beg, p_end)``; ``acc`` accumulates
        [n_leapfrog, sum_metro_prob, divergent].
        """
        if depth == 0:
            z_new = self._leapfrog(z, direction * self.step_size)
            h = self._hamiltonian(z_new) if np.isfinite(z_new.lp) else np.inf
            if np.isnan(h):
                h = np.inf
            acc[0] += 1
            if h - h0 > MAX_DELTA_H:
                acc[2] = True
                return (False, z_new, None, -np.inf, None, None, None, None, None)
            acc[1] += min(1.0, math.exp(h0 - h)) if h0 - h < 0 else 1.0
            p_sharp = self._sharp(z_new.p)
            return (True, z_new, z_new, h0 - h, z_new.p.copy(), p_sharp, p_sharp, z_new.p, z_new.p)

        left = self._build_tree(depth - 1, z, direction, h0, acc)
        if not left[0]:
            return left
        (_, z_mid, prop_l, lsw_l, rho_l, ps_beg, ps_l_end, p_beg, p_l_end) = left
        right = self._build_tree(depth - 1, z_mid, direction, h0, acc)
        if not right[0]:
            return right
        (_, z_end, prop_r, lsw_r, rho_r, ps_r_beg, ps_end, p_r_beg, p_end) = right

        lsw = np.logaddexp(lsw_l, lsw_r)
        proposal = prop_r if math.log(self.rng.random()) < lsw_r - lsw else prop_l
        rho = rho_l + rho_r
        valid = (self._uturn_free(ps_beg, ps_end, rho)
                 and self._uturn_free(ps_beg, ps_r_beg, rho_l + p_r_beg)
                 and self._uturn_free(ps_l_end, ps_end, rho_r + p_l_end))
        return (valid, z_end, proposal, lsw, rho, ps_beg, ps_end, p_beg, p_end)

    def transition(self, x, lp, g):
        """One NUTS iteration from ``x``; returns (x, lp, g, stats)."""
        p0 = self.sample_momentum()
        z0 = _Point(x, p0, g, lp)
        h0 = self._hamiltonian(z0)
        p_sharp0 = self._sharp(p0)

        z_fwd = z0
        z_bck = z0
        sample = z0
        ps_fwd_fwd = ps_fwd_bck = ps_bck_fwd = ps_bck_bck = p_sharp0
        p_fwd_fwd = p_fwd_bck = p_bck_fwd = p_bck_bck = p0
        rho = p0.copy()
        lsw = 0.0
        acc = [0, 0.0, False]
        depth = 0
        while depth < self.max_treedepth:
            # The old trajectory becomes one side of the new tree; its end
            # adjacent to the new subtree feeds the extra U-turn checks.
            if self.rng.random() > 0.5:
                rho_bck = rho
                ps_bck_fwd, p_bck_fwd = ps_fwd_fwd, p_fwd_fwd
                res = self._build_tree(depth, z_fwd, 1, h0, acc)
                valid, z_fwd, proposal, lsw_sub, rho_fwd, ps_fwd_bck, ps_fwd_fwd, p_fwd_bck, p_fwd_fwd = res
            else:
                rho_fwd = rho
                ps_fwd_bck, p_fwd_bck = ps_bck_bck, p_bck_bck
                res = self._build_tree(depth, z_bck, -1, h0, acc)
                valid, z_bck, proposal, lsw_sub, rho_bck, ps_bck_fwd, ps_bck_bck, p_bck_fwd, p_bck_bck = res
            if not valid:
                break
            depth += 1
            if lsw_sub > lsw or self.rng.random() < math.exp(lsw_sub - lsw):
                sample = proposal
            lsw = np.logaddexp(lsw, lsw_sub)
            rho = rho_bck + rho_fwd
            persist = (self._uturn_free(ps_bck_bck, ps_fwd_fwd, rho)
                       and self._uturn_free(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
                       and self._uturn_free(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd))
            if not persist:
                break
        n = max(acc[0], 1)
        stats = {
            "accept_stat": acc[1] / n,
            "n_leapfrog": acc[0],
            "treedepth": depth,
            "divergent": bool(acc[2]),
            "energy": self._hamiltonian(sample),
            "step_size": self.step_size,
        }
        return sample.x, sample.lp, sample.g, stats


class DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    def __init__(self, step_size, target=0.8, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(step_size)

    def restart(self, step_size):
        self.mu = math.log(10.0 * step_size)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat):
        accept_stat = min(1.0, float(accept_stat)) if np.isfinite(accept_stat) else 0.0
        self.counter += 1
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = x_eta * x + (1 - x_eta) * self.x_bar
        return math.exp(x)

    def final(self):
        return math.exp(self.x_bar)


class WindowedAdaptation:
    """Stan-style warmup schedule: fast / doubling slow windows / fast."""

    def __init__(self, num_warmup, init_buffer=75, term_buffer=50, base_window=25):
        self.num_warmup = num_warmup
        if num_warmup < 20:
            self.init_buffer, self.term_buffer, self.base_window = num_warmup, 0, 0
        elif init_buffer + base_window + term_buffer > num_warmup:
            self.init_buffer = int(0.15 * num_warmup)
            self.term_buffer = int(0.1 * num_warmup)
            self.base_window = num_warmup - self.init_buffer - self.term_buffer
        else:
            self.init_buffer, self.term_buffer, self.base_window = init_buffer, term_buffer, base_window
        self.window_ends = self._window_ends()

    def _window_ends(self):
        ends = []
        if self.base_window <= 0:
            return ends
        start = self.init_buffer
        size = self.base_window
        last = self.num_warmup - self.term_buffer
        while start < last:
            end = start + size
            # absorb a trailing window that would be too short to double
            if end + 2 * size > last:
                end = last
            ends.append(end)
            start = end
            size *= 2
        return ends

    def in_slow_window(self, it):
        return self.base_window > 0 and self.init_buffer <= it < self.num_warmup - self.term_buffer

    def window_closes(self, it):
        """True when iteration ``it`` (0-based) is the last of a slow window."""
        return (it + 1) in self.window_ends


class _Welford:
    def __init__(self, dim, dense=False):
        self.n = 0
        self.dense = dense
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim)) if dense else np.zeros(dim)

    def add(self, x):
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += np.outer(d, x - self.mean) if self.dense else d * (x - self.mean)

    def variance(self):
        var = self.m2 / (self.n - 1)
        # shrink toward 1e-3 as Stan does
        reg = 1e-3 * (5.0 / (self.n + 5.0))
        if self.dense:
            return (self.n / (self.n + 5.0)) * var + reg * np.eye(var.shape[0])
        return (self.n / (self.n + 5.0)) * var + reg
