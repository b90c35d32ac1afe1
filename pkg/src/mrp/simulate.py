"""Synthetic university: finite population, heterogeneous treatment effects and a
biased convenience sample, with the ground truth kept for checking estimates.

Cell parameters are additive in gender and major::

    baseline[g, m] = baseline_gender[g] + baseline_major[m]
    effect[g, m]   = effect_gender[g]   + effect_major[m]
    drift[g, m]    = drift_gender[g]    + drift_major[m]
    bias[g, m]     = bias_gender[g]     * bias_major[m]

Pre-scores are ``TN(baseline, pre_sd)`` on the bounds; the two potential
post-scores are ``TN(pre + drift + z * effect, post_sd)`` drawn with common
random numbers, so the arms differ only through the effect.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from .data import Dataset
from .dist import truncnorm_mean, truncnorm_sample

__all__ = [
    "UniversityConfig",
    "generate_university",
    "draw_convenience_sample",
    "PRE",
    "POST",
    "POST_CONTROL",
    "POST_TREATED",
    "TREATMENT",
]

PRE = "mathsanxiety_t1"
POST = "mathsanxiety_t2"
POST_CONTROL = "mathsanxiety_t2_control"
POST_TREATED = "mathsanxiety_t2_treated"
TREATMENT = "Z"

_MAJORS = ("Psychology", "Liberal Arts", "Engineering", "Science", "Economics", "Law")


def _default(values):
    values = dict(values)
    return field(default_factory=lambda: dict(values))


@dataclass
class UniversityConfig:
    """Generating parameters of the synthetic university.

    ``major_share`` is the population share of each major and
    ``female_share`` the share of women within it.
    """

    population_size: int = 4222
    sample_size: int = 300
    major_share: dict = _default(zip(_MAJORS, (0.10, 0.10, 0.25, 0.20, 0.20, 0.15)))
    female_share: dict = _default(zip(_MAJORS, (0.75, 0.60, 0.25, 0.45, 0.40, 0.55)))
    baseline_major: dict = _default(zip(_MAJORS, (33.0, 30.0, 22.0, 25.0, 26.0, 27.0)))
    baseline_gender: dict = _default({"female": 1.5, "male": -1.5})
    effect_major: dict = _default(zip(_MAJORS, (-1.0, -2.0, -7.0, -6.0, -5.0, -4.0)))
    effect_gender: dict = _default({"female": -0.5, "male": 0.5})
    drift_major: dict = _default(zip(_MAJORS, (0.5, 0.3, 0.0, 0.0, -0.2, 0.2)))
    drift_gender: dict = _default({"female": 0.0, "male": 0.0})
    bias_major: dict = _default(zip(_MAJORS, (10.0, 3.0, 1.0, 1.0, 1.0, 1.0)))
    bias_gender: dict = _default({"female": 2.0, "male": 1.0})
    pre_sd: float = 5.0
    post_sd: float = 3.0
    bounds: tuple = (10.0, 50.0)
    seed: int = 0

    def __post_init__(self):
        self.bounds = tuple(float(b) for b in self.bounds)
        self.validate()

    @property
    def majors(self):
        return list(self.major_share)

    @property
    def genders(self):
        return list(self.baseline_gender)

    def validate(self):
        majors, genders = set(self.major_share), set(self.baseline_gender)
        for name in ("female_share", "baseline_major", "effect_major", "drift_major", "bias_major"):
            if set(getattr(self, name)) != majors:
                raise ValueError(f"{name} must list exactly the majors {sorted(majors)}")
        for name in ("effect_gender", "drift_gender", "bias_gender"):
            if set(getattr(self, name)) != genders:
                raise ValueError(f"{name} must list exactly the genders {sorted(genders)}")
        if len(genders) != 2:
            raise ValueError("female_share needs exactly two genders")
        shares = np.array(list(self.major_share.values()), dtype=float)
        if np.any(shares < 0) or not np.isclose(shares.sum(), 1.0):
            raise ValueError("major_share must be nonnegative and sum to 1")
        if any(not 0 <= v <= 1 for v in self.female_share.values()):
            raise ValueError("female_share values must lie in [0, 1]")
        cells = self.cells()
        for col in ("baseline", "effect", "drift", "bias"):
            if not np.all(np.isfinite(cells[col])):
                raise ValueError(f"{col} values must be finite")
        if np.any(cells["bias"] < 0):
            raise ValueError("bias weights must be nonnegative")
        if self.bounds != (10.0, 50.0):
            raise ValueError("the anxiety scale bounds are fixed at (10, 50)")
        if self.pre_sd < 0 or self.post_sd < 0:
            raise ValueError("noise sds must be nonnegative")
        if not 1 <= self.sample_size <= self.population_size:
            raise ValueError("need 1 <= sample_size <= population_size")

    def cells(self):
        """One row per (gender, major) with share, baseline, effect, drift and bias."""
        g0 = self.genders[0]
        rows = []
        for m in self.majors:
            for g in self.genders:
                fs = self.female_share[m]
                rows.append({
                    "gender": g,
                    "major": m,
                    "share": self.major_share[m] * (fs if g == g0 else 1 - fs),
                    "baseline": self.baseline_gender[g] + self.baseline_major[m],
                    "effect": self.effect_gender[g] + self.effect_major[m],
                    "drift": self.drift_gender[g] + self.drift_major[m],
                    "bias": self.bias_gender[g] * self.bias_major[m],
                })
        return pd.DataFrame(rows)

    def homogeneous(self, effect=-4.0):
        """Copy with the same treatment effect in every cell."""
        return replace(self, effect_major={m: float(effect) for m in self.majors},
                       effect_gender={g: 0.0 for g in self.genders})

    def to_dict(self):
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _largest_remainder(shares, total):
    raw = np.asarray(shares, dtype=float) * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def generate_university(cfg):
    """Build the population and its ground truth.

    Returns
    -------
    population : Dataset
        ``gender``, ``major``, the pre-score and both potential post-scores.
    truth : dict
        Realized population means: pre-score, per-arm post minus pre, their
        contrast, and the configured (expected) pre-score mean.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    cells = cfg.cells()
    counts = _largest_remainder(cells["share"], cfg.population_size)
    k = np.repeat(np.arange(len(cells)), counts)
    lb, ub = cfg.bounds
    base = cells["baseline"].to_numpy()[k]
    pre = truncnorm_sample(base, cfg.pre_sd, lb, ub, rng=rng) if cfg.pre_sd > 0 \
        else np.clip(base, lb, ub)
    mu0 = pre + cells["drift"].to_numpy()[k]
    mu1 = mu0 + cells["effect"].to_numpy()[k]
    if cfg.post_sd > 0:
        u = rng.random(k.size)
        post0 = truncnorm_sample(mu0, cfg.post_sd, lb, ub, u=u)
        post1 = truncnorm_sample(mu1, cfg.post_sd, lb, ub, u=u)
    else:
        post0, post1 = np.clip(mu0, lb, ub), np.clip(mu1, lb, ub)
    frame = pd.DataFrame({
        "gender": cells["gender"].to_numpy()[k],
        "major": cells["major"].to_numpy()[k],
        PRE: pre,
        POST_CONTROL: post0,
        POST_TREATED: post1,
    })
    population = Dataset(frame, {"gender": cfg.genders, "major": cfg.majors})
    w = counts / counts.sum()
    if cfg.pre_sd > 0:
        cell_means = truncnorm_mean(cells["baseline"].to_numpy(), cfg.pre_sd, lb, ub)
    else:
        cell_means = np.clip(cells["baseline"].to_numpy(), lb, ub)
    truth = {
        "pre_mean": float(pre.mean()),
        "pre_mean_expected": float(w @ cell_means),
        "post_mean_treated": float(post1.mean()),
        "post_mean_control": float(post0.mean()),
        "effect_treated": float((post1 - pre).mean()),
        "effect_control": float((post0 - pre).mean()),
        "contrast": float((post1 - post0).mean()),
        "cell_counts": {f"{g}|{m}": int(c) for g, m, c in
                        zip(cells["gender"], cells["major"], counts)},
    }
    return population, truth


def draw_convenience_sample(population, cfg, seed=None, potential_outcomes=False):
    """Biased sample without replacement, then complete 50/50 randomization of Z.

    Individuals are drawn sequentially with probability proportional to
    their cell's bias weight. The revealed post-score is the potential
    outcome of the assigned arm; ``potential_outcomes=True`` keeps both
    potential post-scores as well, for checking predictions about the sample.
    """
    n = cfg.sample_size
    if n > population.n_rows:
        raise ValueError("sample_size exceeds the population size")
    bias = {(r.gender, r.major): r.bias for r in cfg.cells().itertuples()}
    w = np.array([bias[(g, m)] for g, m in zip(population.values("gender"),
                                                population.values("major"))], dtype=float)
    if not w.sum() > 0 or np.count_nonzero(w) < n:
        raise ValueError("bias weights leave too few individuals with positive weight")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    idx = np.sort(rng.choice(population.n_rows, size=n, replace=False, p=w / w.sum()))
    z = np.zeros(n)
    z[rng.permutation(n)[: n // 2]] = 1.0
    frame = population.take(idx).frame
    post = np.where(z == 1.0, frame[POST_TREATED], frame[POST_CONTROL])
    out = pd.DataFrame({
        "gender": frame["gender"],
        "major": frame["major"],
        TREATMENT: z,
        PRE: frame[PRE],
        POST: post,
    })
    if potential_outcomes:
        out[POST_CONTROL] = frame[POST_CONTROL].to_numpy()
        out[POST_TREATED] = frame[POST_TREATED].to_numpy()
    return Dataset(out, {"gender": cfg.genders, "major": cfg.majors})
