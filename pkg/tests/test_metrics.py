import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mae_ttt.metrics import (
    DEPRESSED,
    HEALTHY,
    Confusion,
    bootstrap_ci,
    macro_f,
    macro_f_from_f1,
    macro_f_pairs,
    majority_vote,
)


def brute_force_macro_f(y_true, y_pred):
    """Per-class F1 from explicit precision/recall, scanning every pair."""
    scores = []
    for c in (HEALTHY, DEPRESSED):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        pred_c = sum(1 for p in y_pred if p == c)
        true_c = sum(1 for t in y_true if t == c)
        prec = tp / pred_c if pred_c else 0.0
        rec = tp / true_c if true_c else 0.0
        scores.append(0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
    return 100 * sum(scores) / 2


def test_vote_majority_and_ties():
    assert majority_vote([1, 1, 0]) == DEPRESSED
    assert majority_vote([0, 0, 1, 1, 0]) == HEALTHY
    assert majority_vote([1, 0], [0.7, 0.4]) == DEPRESSED
    assert majority_vote([1, 0], [0.6, 0.3]) == HEALTHY
    assert majority_vote([1, 0], [0.5, 0.5]) == HEALTHY


def test_vote_errors():
    with pytest.raises(ValueError):
        majority_vote([])
    with pytest.raises(ValueError, match="tied"):
        majority_vote([0, 1])


@pytest.mark.parametrize("f_h, f_d, expected", [(71.8, 46.6, 59.2), (72.5, 70.3, 71.4)])
def test_reported_spot_values(f_h, f_d, expected):
    assert round(macro_f_from_f1(f_h, f_d), 1) == expected


def test_perfect_and_degenerate_predictions():
    assert macro_f_pairs([0, 1, 0, 1], [0, 1, 0, 1]) == 100.0
    m = macro_f(Confusion.from_pairs([0, 1, 0, 1], [0, 0, 0, 0]))
    assert m.f1_depressed == 0.0
    assert m.f1_healthy == pytest.approx(100 * 2 / 3)
    assert m.macro_f == pytest.approx(100 / 3)


def test_macro_f_matches_brute_force_on_random_configurations():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 40))
        t, p = rng.integers(0, 2, n), rng.integers(0, 2, n)
        assert macro_f_pairs(t, p) == pytest.approx(brute_force_macro_f(t, p), abs=1e-9)


def test_small_exhaustive():
    for n in range(1, 5):
        for t in itertools.product((0, 1), repeat=n):
            for p in itertools.product((0, 1), repeat=n):
                assert macro_f_pairs(t, p) == pytest.approx(brute_force_macro_f(t, p), abs=1e-9)


def test_macro_f_empty_input():
    with pytest.raises(ValueError):
        macro_f(Confusion(0, 0, 0, 0))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=2, max_size=30), st.integers(0, 10**6))
def test_bootstrap_brackets_point_estimate(pairs, seed):
    t, p = zip(*pairs)
    lo, hi = bootstrap_ci(t, p, resamples=200, seed=seed)
    point = macro_f_pairs(t, p)
    assert 0.0 <= lo <= point <= hi <= 100.0


def test_bootstrap_is_deterministic_and_degenerate_when_perfect():
    t = [0, 1] * 10
    assert bootstrap_ci(t, t, seed=3) == (100.0, 100.0)
    rng = np.random.default_rng(1)
    p = rng.integers(0, 2, 20)
    assert bootstrap_ci(t, p, seed=5) == bootstrap_ci(t, p, seed=5)


def test_bootstrap_needs_two():
    with pytest.raises(ValueError):
        bootstrap_ci([1], [1])
