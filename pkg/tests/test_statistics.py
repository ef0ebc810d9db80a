import math

import numpy as np
import pytest

from app.core.statistics import delta_mp, macro_f1, sem
from app.errors import DataError

# (baseline F1, pretrained F1, reported improvement %) per benchmark dataset
PUBLISHED_ROWS = [
    (0.931, 0.949, 25.88),
    (0.824, 0.869, 25.27),
    (0.696, 0.748, 17.07),
    (0.937, 0.944, 10.67),
    (0.620, 0.654, 8.97),
]


# ── macro_f1 ─────────────────────────────────────────────────────────────────


def test_perfect_predictions():
    golds = ["a", "b", "c", "a"]
    assert macro_f1(golds, golds, ["a", "b", "c"]) == 1.0


def test_one_of_each_confusion_cell():
    # class A: TP=1 FP=1 FN=1 TN=1
    golds = ["A", "A", "B", "B"]
    predictions = ["A", "B", "A", "B"]
    assert macro_f1(predictions, golds, ["A", "B"]) == pytest.approx(0.5)


def test_constant_predictor_on_balanced_set():
    golds = ["A", "A", "B", "B"]
    assert macro_f1(["A"] * 4, golds, ["A", "B"]) == pytest.approx(1 / 3)


def test_absent_class_counts_as_zero():
    assert macro_f1(["a", "a"], ["a", "a"], ["a", "b"]) == pytest.approx(0.5)


def test_macro_f1_input_errors():
    with pytest.raises(DataError):
        macro_f1([], [], ["a"])
    with pytest.raises(DataError):
        macro_f1(["a"], ["a", "b"], ["a", "b"])
    with pytest.raises(DataError, match="not among classes"):
        macro_f1(["a", "z"], ["a", "a"], ["a"])


# ── delta_mp ─────────────────────────────────────────────────────────────────


@pytest.mark.parametrize("base, model, expected", PUBLISHED_ROWS)
def test_published_rows(base, model, expected):
    assert abs(delta_mp(base, model) - expected) <= 0.5


def test_self_comparison_is_zero():
    for value in (0.0, 0.3, 0.999):
        assert delta_mp(value, value) == 0.0


def test_regression_is_negative():
    assert delta_mp(0.8, 0.7) == pytest.approx(-50.0)


def test_full_baseline_has_no_headroom():
    with pytest.raises(DataError, match="headroom"):
        delta_mp(1.0, 1.0)


def test_monotone_in_model_f1():
    values = [delta_mp(0.6, m) for m in np.linspace(0.0, 1.0, 21)]
    assert all(b > a for a, b in zip(values, values[1:]))
    assert values[-1] == pytest.approx(100.0)


# ── sem ──────────────────────────────────────────────────────────────────────


def test_constant_values_have_zero_sem():
    assert sem([5, 5, 5, 5]) == 0.0


def test_closed_form():
    assert sem([1, 2, 3, 4, 5]) == pytest.approx(1.5811388300841898 / math.sqrt(5), abs=1e-12)
    assert sem([1, 2, 3, 4, 5]) == pytest.approx(0.7071, abs=1e-4)


def test_sem_matches_formula_on_ten_repeats():
    values = list(np.random.default_rng(3).uniform(0.6, 0.9, size=10))
    expected = float(np.std(values, ddof=1) / math.sqrt(10))
    assert abs(sem(values) - expected) <= 1e-12


def test_sem_scales_linearly():
    values = [0.71, 0.74, 0.69, 0.8]
    assert sem([-3 * v for v in values]) == pytest.approx(3 * sem(values))


def test_sem_needs_two_values():
    with pytest.raises(DataError):
        sem([0.5])
