"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numbers

import numpy as np
import pandas as pd

from .data import DataError, Dataset

__all__ = ["check_dataset", "check_count", "check_probability", "check_seed"]


def check_dataset(X, required=(), name="X"):
    """Coerce ``X`` (Dataset, DataFrame or mapping of columns) to a Dataset."""
    if isinstance(X, Dataset):
        data = X
    elif isinstance(X, (pd.DataFrame, dict)):
        data = Dataset(X)
    else:
        raise TypeError(f"{name} must be a Dataset, DataFrame or dict of columns, "
                        f"got {type(X).__name__}")
    missing = [c for c in required if c not in data]
    if missing:
        raise DataError(f"{name} is missing columns {missing}")
    return data


def check_count(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_probability(value, name):
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return value


def check_seed(seed):
    """Seeds are nonnegative integers so they can be recorded in manifests."""
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, numbers.Integral) or seed < 0:
        raise ValueError(f"seed must be a nonnegative integer, got {seed!r}")
    return int(seed)
