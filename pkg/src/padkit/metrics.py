"""APCER / BPCER / EER and ROC points for presentation-attack scores.

Decision rule everywhere: a presentation is flagged as an attack iff
``attack_prob >= threshold``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

GENUINE = "genuine"
ATTACK = "attack"
OPERATING_THRESHOLD = 0.5

# Thresholds just outside the probability range: below 0 everything is an
# attack, above 1 nothing is.
T_LOW = float(np.nextafter(0.0, -1.0))
T_HIGH = float(np.nextafter(1.0, 2.0))


class UndefinedMetricError(ValueError):
    """A rate was requested for a class with no records."""


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    attack_prob: float
    true_label: str
    attack_type: int = 0
    subject_id: int = -1

    def __post_init__(self):
        if not 0.0 <= self.attack_prob <= 1.0:
            raise ValueError(f"attack_prob {self.attack_prob} outside [0, 1]")
        if self.true_label not in (GENUINE, ATTACK):
            raise ValueError(f"unknown label {self.true_label!r}")


@dataclass
class MetricsReport:
    apcer: float
    bpcer: float
    threshold: float
    eer: float
    eer_threshold: float
    roc: list = field(default_factory=list)
    mode: str = "per_frame"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["roc"] = [dict(p) for p in d.get("roc", [])]
        return cls(**d)


def _split(scores) -> tuple[np.ndarray, np.ndarray]:
    """Return (attack_probs, genuine_probs) from records or (probs, labels)."""
    if isinstance(scores, tuple) and len(scores) == 2:
        probs = np.asarray(scores[0], dtype=float)
        labels = np.asarray(scores[1])
        if labels.dtype.kind in "US":
            is_attack = labels == ATTACK
        else:
            is_attack = labels.astype(bool)
        return probs[is_attack], probs[~is_attack]
    scores = list(scores)
    att = np.array([s.attack_prob for s in scores if s.true_label == ATTACK], dtype=float)
    gen = np.array([s.attack_prob for s in scores if s.true_label == GENUINE], dtype=float)
    return att, gen


def apcer(scores, threshold: float = OPERATING_THRESHOLD) -> float:
    """Fraction of attacks scored below ``threshold`` (accepted as bona fide)."""
    att, _ = _split(scores)
    if att.size == 0:
        raise UndefinedMetricError("APCER needs at least one attack record")
    return float(np.count_nonzero(att < threshold) / att.size)


def bpcer(scores, threshold: float = OPERATING_THRESHOLD) -> float:
    """Fraction of bona fide presentations scored at or above ``threshold``."""
    _, gen = _split(scores)
    if gen.size == 0:
        raise UndefinedMetricError("BPCER needs at least one genuine record")
    return float(np.count_nonzero(gen >= threshold) / gen.size)


def _rates(att: np.ndarray, gen: np.ndarray, thresholds: np.ndarray):
    att_sorted = np.sort(att)
    gen_sorted = np.sort(gen)
    a = np.searchsorted(att_sorted, thresholds, side="left") / att.size
    b = (gen.size - np.searchsorted(gen_sorted, thresholds, side="left")) / gen.size
    return a, b


def _both_classes(scores):
    att, gen = _split(scores)
    if att.size == 0 or gen.size == 0:
        raise UndefinedMetricError("EER/ROC need both genuine and attack records")
    return att, gen


def roc_points(scores) -> list[tuple[float, float, float]]:
    """(threshold, apcer, bpcer) for every distinct score plus both endpoints.

    Ordered by strictly decreasing threshold, from (APCER, BPCER) = (1, 0)
    down to (0, 1).
    """
    att, gen = _both_classes(scores)
    thr = np.concatenate([[T_HIGH], np.unique(np.concatenate([att, gen]))[::-1], [T_LOW]])
    a, b = _rates(att, gen, thr)
    return [(float(t), float(x), float(y)) for t, x, y in zip(thr, a, b)]


def eer(scores) -> tuple[float, float]:
    """Equal error rate and the threshold where it occurs.

    APCER - BPCER is swept over every distinct score (plus the point above 1);
    at an exact zero the common value is returned, otherwise both rates are
    linearly interpolated between the two thresholds bracketing the sign change.
    """
    att, gen = _both_classes(scores)
    thr = np.concatenate([np.unique(np.concatenate([att, gen])), [T_HIGH]])
    a, b = _rates(att, gen, thr)
    d = a - b
    # d is non-decreasing, starts at -1 (lowest score) and ends at +1
    i = int(np.argmax(d >= 0))
    if d[i] == 0:
        return float(a[i]), float(thr[i])
    w = -d[i - 1] / (d[i] - d[i - 1])
    value = a[i - 1] + w * (a[i] - a[i - 1])
    t = thr[i - 1] + w * (thr[i] - thr[i - 1])
    return float(value), float(t)


def compute_report(scores, threshold: float = OPERATING_THRESHOLD, mode: str = "per_frame") -> MetricsReport:
    scores = list(scores) if not isinstance(scores, tuple) else scores
    e, et = eer(scores)
    roc = [{"threshold": t, "bpcer": b, "tpr": 1.0 - a} for t, a, b in roc_points(scores)]
    return MetricsReport(
        apcer=apcer(scores, threshold),
        bpcer=bpcer(scores, threshold),
        threshold=threshold,
        eer=e,
        eer_threshold=et,
        roc=roc,
        mode=mode,
    )


SCORE_FIELDS = ["id", "subject_id", "attack_type", "true_label", "attack_prob"]


def write_scores(records: Iterable[ScoreRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for r in records:
            w.writerow([r.id, r.subject_id, r.attack_type, r.true_label, repr(float(r.attack_prob))])


def read_scores(path) -> list[ScoreRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = set(SCORE_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: score file lacks columns {sorted(missing)}")
        return [
            ScoreRecord(
                id=row["id"],
                attack_prob=float(row["attack_prob"]),
                true_label=row["true_label"],
                attack_type=int(row["attack_type"]),
                subject_id=int(row["subject_id"]),
            )
            for row in reader
        ]


def write_report(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")


def read_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
