"""Uncertainty sampling scores over softmax outputs and the exit test."""

from __future__ import annotations

import enum
import math

import numpy as np

RATIO_FLOOR = 1e-12
SUM_TOLERANCE = 1e-6


class UncertaintyMethod(str, enum.Enum):
    LEAST_CONFIDENCE = "least_confidence"
    MARGIN = "margin_of_confidence"
    RATIO = "ratio_of_confidence"
    ENTROPY = "entropy"

    @classmethod
    def parse(cls, value: "str | UncertaintyMethod") -> "UncertaintyMethod":
        if isinstance(value, cls):
            return value
        aliases = {
            "least_confidence": cls.LEAST_CONFIDENCE,
            "least": cls.LEAST_CONFIDENCE,
            "margin": cls.MARGIN,
            "margin_of_confidence": cls.MARGIN,
            "ratio": cls.RATIO,
            "ratio_of_confidence": cls.RATIO,
            "entropy": cls.ENTROPY,
        }
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown uncertainty method {value!r}") from None

    @property
    def exits_when_high(self) -> bool:
        """True when a larger score means more confident (margin, ratio)."""
        return self in (UncertaintyMethod.MARGIN, UncertaintyMethod.RATIO)


def _top_two(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    part = np.partition(probs, -2, axis=-1)
    return part[..., -1], part[..., -2]


def _validate(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 0 or probs.shape[-1] < 2:
        raise ValueError("need at least 2 class probabilities")
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ValueError("probabilities must be finite and non-negative")
    if np.any(np.abs(probs.sum(axis=-1) - 1.0) > SUM_TOLERANCE):
        raise ValueError("probabilities must sum to 1")
    return probs


def uncertainty_score(probs, method: "str | UncertaintyMethod"):
    """Score one distribution (K,) or a batch (N, K).

    least_confidence = 1 - p1; margin = p1 - p2; ratio = p1 / max(p2, 1e-12);
    entropy = -sum(p ln p) / ln K, which lies in [0, 1].
    """
    method = UncertaintyMethod.parse(method)
    probs = _validate(probs)
    p1, p2 = _top_two(probs)
    if method is UncertaintyMethod.LEAST_CONFIDENCE:
        score = 1.0 - p1
    elif method is UncertaintyMethod.MARGIN:
        score = p1 - p2
    elif method is UncertaintyMethod.RATIO:
        score = p1 / np.maximum(p2, RATIO_FLOOR)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(probs > 0, probs * np.log(probs), 0.0)
        score = -terms.sum(axis=-1) / math.log(probs.shape[-1])
        score = np.clip(score, 0.0, 1.0)
    return float(score) if np.ndim(score) == 0 else score


def check_threshold(method: "str | UncertaintyMethod", theta: float) -> None:
    """Reject thresholds outside the method's legal domain.

    ratio takes theta >= 1; the other methods take theta in [0, 1].
    """
    method = UncertaintyMethod.parse(method)
    if not math.isfinite(theta):
        raise ValueError("threshold must be finite")
    if method is UncertaintyMethod.RATIO:
        if theta < 1.0:
            raise ValueError(f"ratio threshold must be >= 1, got {theta}")
    elif not 0.0 <= theta <= 1.0:
        raise ValueError(f"{method.value} threshold must lie in [0, 1], got {theta}")


def exit_decision(score, method: "str | UncertaintyMethod", theta: float):
    """Whether a prediction with this uncertainty score may exit.

    margin and ratio exit when score >= theta; least_confidence and entropy
    exit when score <= theta.
    """
    method = UncertaintyMethod.parse(method)
    check_threshold(method, theta)
    if method.exits_when_high:
        return score >= theta
    return score <= theta
