from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import stats
from sklearn.metrics import f1_score

from app.errors import DataError


def macro_f1(predictions: Sequence[str], golds: Sequence[str], classes: Sequence[str]) -> float:
    """Unweighted mean of per-class F1 over `classes`.

    A class with neither predictions nor gold examples still counts, with F1 = 0.
    """
    if not golds:
        raise DataError("macro_f1 needs at least one prediction")
    if len(predictions) != len(golds):
        raise DataError(f"{len(predictions)} predictions for {len(golds)} gold labels")
    known = set(classes)
    unknown = (set(predictions) | set(golds)) - known
    if unknown:
        raise DataError(f"labels {sorted(unknown)} are not among classes {list(classes)}")
    return float(
        f1_score(list(golds), list(predictions), labels=list(classes), average="macro", zero_division=0)
    )


def delta_mp(f1_base: float, f1_model: float) -> float:
    """Relative improvement in marginal performance, in percent.

    (f1_model - f1_base) / (1 - f1_base) * 100; improvements are positive.
    """
    if f1_base >= 1:
        raise DataError(f"delta_mp undefined for baseline F1 {f1_base} (no headroom)")
    return (f1_model - f1_base) / (1 - f1_base) * 100.0


def sem(values: Sequence[float]) -> float:
    """Sample standard deviation (n - 1) over sqrt(n)."""
    if len(values) < 2:
        raise DataError(f"sem needs at least 2 values, got {len(values)}")
    result = float(stats.sem(np.asarray(values, dtype=np.float64), ddof=1))
    return 0.0 if math.isnan(result) else result
