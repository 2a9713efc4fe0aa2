"""Attack-success metrics for both attack directions.

Threshold conventions: a score ``>= tau`` counts as ID. FNR counts scores
strictly below ``tau``, FPR counts scores at or above it, so the two are
complementary on any list. AUROC gives half credit to ties.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError

METRICS = ("acc", "auroc", "fnr95", "fpr95", "tsuc")


@dataclass(frozen=True)
class MetricRow:
    metric: str
    value: float
    n_pos: int
    n_neg: int = 0
    threshold: float | None = None
    model_id: str = ""
    head: str = ""
    detector: str = ""
    attack_config_digest: str | None = None
    role: str = ""  # whitebox | blackbox | blackbox_avg | clean | noise

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValidationError(f"unknown metric {self.metric!r}", module="metrics", key="metric")
        if not 0.0 <= self.value <= 1.0:
            raise ValidationError(f"metric value {self.value} outside [0, 1]", module="metrics", key=self.metric)
        if self.n_pos <= 0:
            raise ValidationError("population sizes must be positive", module="metrics", key="n_pos")

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)


def _nonempty(xs, name) -> np.ndarray:
    arr = np.asarray(xs, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValidationError(f"{name} must be nonempty", module="metrics", key=name)
    return arr


def auroc(pos_scores, neg_scores) -> float:
    """Mann-Whitney statistic: P(pos > neg) + 0.5 P(pos == neg)."""
    pos = _nonempty(pos_scores, "pos_scores")
    neg = _nonempty(neg_scores, "neg_scores")
    ranks = rankdata(np.concatenate([pos, neg]))  # average ranks handle ties
    n_pos, n_neg = pos.size, neg.size
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_bruteforce(pos_scores, neg_scores) -> float:
    pos = _nonempty(pos_scores, "pos_scores")
    neg = _nonempty(neg_scores, "neg_scores")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


def fnr_at_threshold(adv_scores, tau: float) -> float:
    s = _nonempty(adv_scores, "adv_scores")
    return float(np.count_nonzero(s < tau) / s.size)


def fpr_at_threshold(distal_scores, tau: float) -> float:
    s = _nonempty(distal_scores, "distal_scores")
    return float(np.count_nonzero(s >= tau) / s.size)


def _equal_length(a, b, name):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError(f"length mismatch {a.shape} vs {b.shape}", module="metrics", key=name)
    if a.size == 0:
        raise ValidationError(f"{name} must be nonempty", module="metrics", key=name)
    return a, b


def accuracy(predictions, labels) -> float:
    p, y = _equal_length(predictions, labels, "labels")
    return float(np.mean(p == y))


def targeted_success(predictions, targets) -> float:
    p, t = _equal_length(predictions, targets, "targets")
    return float(np.mean(p == t))
