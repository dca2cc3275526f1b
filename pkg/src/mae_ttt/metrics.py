"""Recording-level voting, macro F-score and bootstrap confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

HEALTHY, DEPRESSED = 0, 1
LABEL_NAMES = ("healthy", "depressed")


def majority_vote(predictions: Sequence[int], p_depressed: Sequence[float] | None = None) -> int:
    """Most frequent segment label; a tie goes to depressed iff the mean
    depressed-class probability across segments exceeds 0.5."""
    preds = list(predictions)
    if not preds:
        raise ValueError("majority_vote needs at least one segment prediction")
    n_dep = sum(1 for p in preds if p == DEPRESSED)
    n_hea = len(preds) - n_dep
    if n_dep != n_hea:
        return DEPRESSED if n_dep > n_hea else HEALTHY
    if p_depressed is None or len(p_depressed) != len(preds):
        raise ValueError("tied vote needs per-segment depressed probabilities")
    return DEPRESSED if float(np.mean(p_depressed)) > 0.5 else HEALTHY


@dataclass(frozen=True)
class Confusion:
    tp: int  # depressed predicted depressed
    fn: int
    fp: int
    tn: int

    @classmethod
    def from_pairs(cls, y_true: Sequence[int], y_pred: Sequence[int]) -> "Confusion":
        t = np.asarray(y_true)
        p = np.asarray(y_pred)
        if t.shape != p.shape:
            raise ValueError("y_true and y_pred differ in length")
        return cls(
            int(np.sum((t == 1) & (p == 1))),
            int(np.sum((t == 1) & (p == 0))),
            int(np.sum((t == 0) & (p == 1))),
            int(np.sum((t == 0) & (p == 0))),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


def _f1(tp: int, fp: int, fn: int) -> float:
    # empty class (no predictions, no positives) scores 0
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


@dataclass(frozen=True)
class MacroF:
    f1_healthy: float
    f1_depressed: float
    macro_f: float


def macro_f_from_f1(f1_healthy: float, f1_depressed: float) -> float:
    return (f1_healthy + f1_depressed) / 2


def macro_f(conf: Confusion) -> MacroF:
    """Per-class F1 and their mean, all scaled to 0-100."""
    if conf.total == 0:
        raise ValueError("macro_f needs at least one prediction")
    f_dep = 100.0 * _f1(conf.tp, conf.fp, conf.fn)
    f_hea = 100.0 * _f1(conf.tn, conf.fn, conf.fp)
    return MacroF(f_hea, f_dep, macro_f_from_f1(f_hea, f_dep))


def macro_f_pairs(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    return macro_f(Confusion.from_pairs(y_true, y_pred)).macro_f


def bootstrap_ci(y_true: Sequence[int], y_pred: Sequence[int], resamples: int = 1000,
                 level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap of macro-F over recordings.

    The bounds are widened to include the point estimate so that
    ``low <= macro_f <= high`` always holds.
    """
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    n = len(t)
    if n < 2:
        raise ValueError("bootstrap_ci needs at least 2 recordings")
    rng = np.random.default_rng(seed)
    stats = np.empty(resamples)
    for i in range(resamples):
        idx = rng.integers(0, n, size=n)
        stats[i] = macro_f_pairs(t[idx], p[idx])
    alpha = (1.0 - level) / 2
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    point = macro_f_pairs(t, p)
    return float(min(lo, point)), float(max(hi, point))
