import warnings

import numpy as np
import pandas as pd
import pytest

from mrp.data import Dataset, PoststratTable
from mrp.dist import truncnorm_sample
from mrp.sampler import ConvergenceWarning, SamplerConfig, sample_posterior
from mrp.simulate import UniversityConfig, draw_convenience_sample, generate_university

AGES = [str(i) for i in range(1, 7)]
OPENNESS = "O | trunc(lb=10, ub=50) ~ female + (1|age_group)"
PRE_FORMULA = "mathsanxiety_t1 | trunc(lb=10, ub=50) ~ (1|gender) + (1|major)"
POST_FORMULA = "mathsanxiety_t2 | trunc(lb=10, ub=50) ~ mathsanxiety_t1 + (Z|gender) + (Z|major)"


def openness_sample(n=300, seed=0):
    """Synthetic survey: younger, mostly female respondents with a female effect of -2.7."""
    rng = np.random.default_rng(seed)
    female = (rng.random(n) < 0.7).astype(float)
    age = rng.choice(6, n, p=[0.35, 0.25, 0.15, 0.1, 0.1, 0.05])
    mu = 36.0 - 2.7 * female + np.array([1.5, 1.0, 0.0, -0.5, -1.0, -1.0])[age]
    o = truncnorm_sample(mu, 6.0, 10, 50, rng=rng)
    frame = pd.DataFrame({"O": o, "female": female, "age_group": np.array(AGES)[age]})
    return Dataset(frame, {"age_group": AGES})


def openness_table():
    counts = [10713479, 15974402, 22216888, 20279699, 31659960, 30275386,
              10193764, 15166108, 21758629, 20455441, 32907478, 36732643]
    cells = [(f, a) for f in ("0", "1") for a in AGES]
    return PoststratTable(("female", "age_group"), cells, counts)


def quick_config(seed=1, **kw):
    base = dict(chains=2, warmup=300, draws=300, seed=seed, target_accept=0.9)
    base.update(kw)
    return SamplerConfig(**base)


def fit_quietly(*args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return sample_posterior(*args, **kwargs)


@pytest.fixture(scope="session")
def openness_data():
    return openness_sample()


@pytest.fixture(scope="session")
def openness_fit(openness_data):
    return fit_quietly(OPENNESS, openness_data, config=quick_config())


@pytest.fixture(scope="session")
def university():
    cfg = UniversityConfig(seed=3)
    population, truth = generate_university(cfg)
    sample = draw_convenience_sample(population, cfg)
    return cfg, population, truth, sample


@pytest.fixture(scope="session")
def two_stage(university):
    from mrp.effects import fit_two_stage
    _, _, _, sample = university
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return fit_two_stage(PRE_FORMULA, POST_FORMULA, sample,
                             config=quick_config(seed=5, chains=1, warmup=250, draws=250,
                                                 target_accept=0.8))


# -- acceptance report ----------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one summary line per acceptance criterion: ``acceptance(n, ok, detail)``."""
    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
