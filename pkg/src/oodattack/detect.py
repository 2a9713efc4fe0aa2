"""Post-hoc OOD scores and the clean-ID 95% TPR threshold."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import softmax

from .errors import ConfigError, ValidationError

log = logging.getLogger(__name__)


class DetectorKind(str, Enum):
    MCM = "MCM"
    MSP = "MSP"


@dataclass(frozen=True)
class DetectorConfig:
    kind: DetectorKind = DetectorKind.MCM
    temperature: float = 1.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", DetectorKind(self.kind))
        except ValueError as e:
            raise ConfigError(f"unknown detector kind {self.kind!r}", module="ood-detect", key="detector.kind") from e
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive", module="ood-detect", key="detector.temperature")


@dataclass(frozen=True)
class ThresholdPolicy:
    tpr_target: float = 0.95
    interpolation: str = "linear"
    tie_rule: str = "score >= tau counts as ID"

    def __post_init__(self):
        if not 0.0 < self.tpr_target < 1.0:
            raise ConfigError("tpr_target must lie in (0, 1)", module="ood-detect", key="tpr_target")
        if self.interpolation != "linear":
            raise ConfigError("only linear interpolation is supported", module="ood-detect", key="interpolation")


def mcm_score(sims, temperature: float = 1.0):
    """Max of softmax(sims / T) over the last axis."""
    s = np.asarray(sims, dtype=np.float64)
    if s.shape[-1] < 1:
        raise ValidationError("need at least one similarity", module="ood-detect", key="sims")
    p = softmax(s / temperature, axis=-1)
    out = p.max(axis=-1)
    return float(out) if out.ndim == 0 else out


def msp_score(probs):
    p = np.asarray(probs, dtype=np.float64)
    if (p < -1e-12).any() or (np.abs(p.sum(axis=-1) - 1.0) > 1e-6).any():
        raise ValidationError("input is not a probability simplex", module="ood-detect", key="probs")
    out = p.max(axis=-1)
    return float(out) if out.ndim == 0 else out


def score(kind: DetectorKind, values, temperature: float = 1.0):
    """Cosine similarities for MCM, class probabilities for MSP."""
    if DetectorKind(kind) is DetectorKind.MCM:
        return mcm_score(values, temperature)
    return msp_score(values)


def tpr95_threshold(clean_scores, policy: ThresholdPolicy | None = None) -> float:
    """Linear-interpolated ``(1 - tpr)`` quantile of the clean scores.

    With few scores the interpolated quantile can sit above the order statistic
    needed for the TPR guarantee (e.g. n=30), in which case that order
    statistic is used instead, so that ``mean(clean >= tau) >= tpr`` always.
    """
    policy = policy or ThresholdPolicy()
    s = np.sort(np.asarray(clean_scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValidationError("clean score list is empty", module="ood-detect", key="clean_scores")
    if s.size < 20:
        log.warning("only %d clean scores; the %.0f%% quantile is degenerate", s.size, 100 * (1 - policy.tpr_target))
    tau = float(np.quantile(s, 1.0 - policy.tpr_target, method="linear"))
    need = math.ceil(policy.tpr_target * s.size - 1e-9)
    return min(tau, float(s[s.size - need]))


def clean_tpr(clean_scores, tau: float) -> float:
    s = np.asarray(clean_scores, dtype=np.float64)
    return float(np.mean(s >= tau))
