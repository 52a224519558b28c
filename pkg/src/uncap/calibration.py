"""Split-conformal confidence/uncertainty calibration of class-confidence vectors.

Nonconformity of a labelled sample is ``1 - conf[true_class]``.  A new vector
is mapped to the threshold ``c* = 1 - second_highest(conf)`` (the loosest
threshold whose prediction band is still the top-1 singleton) and its
calibrated confidence is the empirical CDF of the nonconformity scores at
``c*``.  Perception uncertainty is the complement.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .scenario import Detection

MODES = ("standard", "conformal")


class DegenerateBandError(ValueError):
    """Top-two confidences tie, so the strict-threshold band is not a singleton."""


class Calibrator(Protocol):
    def calibrate(self, conf: Sequence[float]) -> tuple[float, float]: ...


@dataclass(frozen=True)
class NonconformityModel:
    scores: tuple[float, ...]
    mode: str = "standard"

    def __post_init__(self):
        if not self.scores:
            raise ValueError("nonconformity model needs at least one score")
        if any(b < a for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("scores must be sorted ascending")
        if self.scores[0] < 0.0 or self.scores[-1] > 1.0:
            raise ValueError("scores must lie in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def n(self) -> int:
        return len(self.scores)

    def calibrate(self, conf: Sequence[float]) -> tuple[float, float]:
        return calibrate(self, conf)

    def to_json(self) -> str:
        return json.dumps({"scores": [float(s) for s in self.scores], "n": self.n, "mode": self.mode})

    @classmethod
    def from_json(cls, text: str) -> "NonconformityModel":
        doc = json.loads(text)
        model = cls(tuple(float(s) for s in doc["scores"]), doc.get("mode", "standard"))
        if int(doc.get("n", model.n)) != model.n:
            raise ValueError("calibrator file: n does not match the number of scores")
        return model


def save_calibrator(model: NonconformityModel, path: str | Path) -> None:
    Path(path).write_text(model.to_json() + "\n", encoding="utf-8")


def load_calibrator(path: str | Path) -> NonconformityModel:
    return NonconformityModel.from_json(Path(path).read_text(encoding="utf-8"))


def fit_calibrator(calib_set: Iterable[tuple[Sequence[float], int]], mode: str = "standard") -> NonconformityModel:
    scores = []
    for conf, label in calib_set:
        if not 0 <= label < len(conf):
            raise ValueError(f"true class {label} outside [0, {len(conf)})")
        scores.append(min(1.0, max(0.0, 1.0 - float(conf[label]))))
    if not scores:
        raise ValueError("calibration set is empty")
    return NonconformityModel(tuple(sorted(scores)), mode)


def _top_two(conf: Sequence[float]) -> tuple[float, float]:
    if len(conf) < 2:
        raise ValueError("need at least two classes")
    first = second = float("-inf")
    for c in conf:
        if c > first:
            first, second = c, first
        elif c > second:
            second = c
    return first, second


def singleton_threshold(conf: Sequence[float]) -> float:
    return 1.0 - _top_two(conf)[1]


def empirical_cdf(model: NonconformityModel, x: float) -> float:
    """Right-continuous CDF of the scores; ``conformal`` mode divides by n + 1."""
    count = bisect.bisect_right(model.scores, x)
    if model.mode == "conformal":
        return min(1.0, max(0.0, count / (model.n + 1)))
    return count / model.n


def calibrate(model: NonconformityModel, conf: Sequence[float]) -> tuple[float, float]:
    """Return (p_calibrated, u_p) for one confidence vector."""
    p = empirical_cdf(model, singleton_threshold(conf))
    return p, 1.0 - p


@dataclass(frozen=True)
class PredictionBand:
    class_indices: frozenset[int]


def prediction_band(conf: Sequence[float], c_star: float) -> PredictionBand:
    """Classes whose confidence strictly exceeds ``1 - c_star``."""
    first, second = _top_two(conf)
    if first == second:
        raise DegenerateBandError("degenerate band: top-two confidences tie")
    threshold = 1.0 - c_star
    # 1 - (1 - s) is not always s in floating point; keep the boundary exact
    if abs(threshold - second) <= 1e-12:
        threshold = second
    return PredictionBand(frozenset(i for i, c in enumerate(conf) if c > threshold))


def argmax(conf: Sequence[float]) -> int:
    best = 0
    for i, c in enumerate(conf):
        if c > conf[best]:
            best = i
    return best


@dataclass(frozen=True)
class CalibratedDetection:
    detection: Detection
    predicted_class: int
    c_star: float
    p_calibrated: float
    u_p: float

    @property
    def object_id(self) -> int:
        return self.detection.object_id

    @property
    def observer_id(self) -> int:
        return self.detection.observer_id

    @property
    def location(self) -> tuple[float, float]:
        return self.detection.location

    @property
    def raw_confidence(self) -> float:
        return max(self.detection.confidence_vector)


def calibrate_detection(model: Calibrator, det: Detection) -> CalibratedDetection:
    conf = det.confidence_vector
    p, u = model.calibrate(conf)
    return CalibratedDetection(det, argmax(conf), singleton_threshold(conf), p, u)


def coverage_check(model: NonconformityModel,
                   test_set: Iterable[tuple[Sequence[float], int]]) -> tuple[float, float]:
    """Empirical singleton-band coverage and the mean calibrated confidence.

    A tie at the top counts as a miss (no singleton band exists).
    """
    hits = total = 0
    p_sum = 0.0
    for conf, label in test_set:
        total += 1
        p_sum += calibrate(model, conf)[0]
        try:
            band = prediction_band(conf, singleton_threshold(conf))
        except DegenerateBandError:
            continue
        hits += label in band.class_indices
    if total == 0:
        raise ValueError("test set is empty")
    return hits / total, p_sum / total
