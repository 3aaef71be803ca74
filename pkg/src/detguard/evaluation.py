"""Detection metrics: matching, precision/recall sweeps, AP, false-alert rate."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .detectors import Detection
from .geometry import PixelBox, iou


def default_grid() -> tuple[float, ...]:
    return tuple(round(0.05 * k, 2) for k in range(20))


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    conf_grid: tuple[float, ...] = field(default_factory=default_grid)
    anchor: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"IoU threshold {self.iou_threshold} outside (0, 1]")
        if not self.conf_grid:
            raise ValueError("empty confidence grid")
        if any(b < a for a, b in zip(self.conf_grid, self.conf_grid[1:])):
            raise ValueError("confidence grid must be sorted ascending")
        if not 0.0 <= self.anchor <= 1.0:
            raise ValueError(f"recall anchor {self.anchor} outside [0, 1]")


@dataclass(frozen=True)
class Match:
    tp: int
    fp: int
    fn: int
    # per ground truth: index of the matching detection (sorted order) or -1
    assigned: tuple[int, ...] = ()


def match_detections(detections: Optional[Sequence[Detection]], ground_truth: Sequence[PixelBox],
                     iou_threshold: float = 0.5) -> Match:
    """Greedy matching in descending confidence.

    Each detection takes the unmatched same-label ground truth of highest
    IoU, provided the IoU reaches ``iou_threshold``. ``detections=None``
    marks an alerted image: no TP, no FP, every object a FN.
    """
    n = len(ground_truth)
    if detections is None:
        return Match(0, 0, n, (-1,) * n)
    order = sorted(range(len(detections)), key=lambda k: -detections[k].confidence)
    assigned = [-1] * n
    tp = 0
    for rank, k in enumerate(order):
        det = detections[k]
        best, best_iou = -1, iou_threshold
        for g, gt in enumerate(ground_truth):
            if assigned[g] >= 0 or gt.label != det.label:
                continue
            v = iou(det.box, gt)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = g, v
        if best >= 0:
            assigned[best] = rank
            tp += 1
    return Match(tp, len(detections) - tp, n - tp, tuple(assigned))


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    alerts: int
    n_images: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def far(self) -> float:
        return self.alerts / self.n_images if self.n_images else 0.0


@dataclass(frozen=True)
class VerdictRecord:
    """One image at one confidence threshold: base output and the defense's verdict."""

    image_id: str
    threshold: float
    base: tuple[Detection, ...]
    alert: bool

    @property
    def defended(self) -> Optional[tuple[Detection, ...]]:
        return None if self.alert else self.base


def sweep(records: Iterable[VerdictRecord], annotations: Mapping[str, Sequence[PixelBox]],
          cfg: EvalConfig, defended: bool = True) -> list[SweepPoint]:
    """Aggregate per-image verdicts into one point per threshold (ascending)."""
    acc: dict[float, list[int]] = {}
    for rec in records:
        m = match_detections(rec.defended if defended else rec.base, annotations[rec.image_id], cfg.iou_threshold)
        row = acc.setdefault(rec.threshold, [0, 0, 0, 0, 0])
        row[0] += m.tp
        row[1] += m.fp
        row[2] += m.fn
        row[3] += int(rec.alert and defended)
        row[4] += 1
    return [SweepPoint(t, *acc[t]) for t in sorted(acc)]


def average_precision(points: Sequence[SweepPoint]) -> float:
    """All-point interpolated AP: area under the interpolated precision-recall curve.

    Precision at recall level ``R`` is the best precision over points whose
    recall is at least ``R``; the curve is integrated over the achieved
    recall levels, starting from recall 0.
    """
    if not points:
        raise ValueError("empty sweep")
    pr = sorted({(p.recall, p.precision) for p in points})
    recalls = np.array([r for r, _ in pr])
    precisions = np.array([p for _, p in pr])
    levels = np.unique(recalls[recalls > 0])
    ap, prev = 0.0, 0.0
    for r in levels:
        ap += (r - prev) * precisions[recalls >= r].max()
        prev = r
    return float(ap)


@dataclass(frozen=True)
class Operating:
    point: SweepPoint
    reached: bool


def operating_point(points: Sequence[SweepPoint], anchor: float) -> Operating:
    """Highest threshold whose clean recall is at least ``anchor``.

    When no threshold reaches the anchor, the point of highest recall is
    returned (lowest threshold among ties) and flagged as not reached.
    """
    if not points:
        raise ValueError("empty sweep")
    ok = [p for p in points if p.recall >= anchor]
    if ok:
        return Operating(max(ok, key=lambda p: p.threshold), True)
    best = max(p.recall for p in points)
    return Operating(min((p for p in points if p.recall == best), key=lambda p: p.threshold), False)


def far_at_recall(points: Sequence[SweepPoint], anchor: float) -> tuple[float, bool]:
    op = operating_point(points, anchor)
    return op.point.far, op.reached


@dataclass
class EvalReport:
    base: list[SweepPoint]
    defense: list[SweepPoint]
    base_ap: float
    ap: float
    anchor: float
    operating: Operating

    @property
    def far(self) -> float:
        return self.operating.point.far


def evaluate(records: Sequence[VerdictRecord], annotations: Mapping[str, Sequence[PixelBox]],
             cfg: EvalConfig) -> EvalReport:
    base = sweep(records, annotations, cfg, defended=False)
    defense = sweep(records, annotations, cfg, defended=True)
    return EvalReport(base, defense, average_precision(base), average_precision(defense), cfg.anchor,
                      operating_point(defense, cfg.anchor))


REPORT_COLUMNS = ("row", "threshold", "base_tp", "base_fp", "base_fn", "base_precision", "base_recall",
                  "tp", "fp", "fn", "precision", "recall", "alerts", "far", "base_ap", "ap", "anchor",
                  "anchor_reached")


def report_rows(report: EvalReport) -> list[list[str]]:
    def cells(b: SweepPoint, d: SweepPoint) -> list[str]:
        return [repr(d.threshold), str(b.tp), str(b.fp), str(b.fn), f"{b.precision:.6f}", f"{b.recall:.6f}",
                str(d.tp), str(d.fp), str(d.fn), f"{d.precision:.6f}", f"{d.recall:.6f}", str(d.alerts),
                f"{d.far:.6f}"]

    rows = [["threshold"] + cells(b, d) + ["", "", "", ""] for b, d in zip(report.base, report.defense)]
    op = report.operating.point
    b = next(p for p in report.base if p.threshold == op.threshold)
    rows.append(["summary"] + cells(b, op) + [f"{report.base_ap:.6f}", f"{report.ap:.6f}", repr(report.anchor),
                                              "1" if report.operating.reached else "0"])
    return rows


def per_class_recall(flags: Iterable[tuple[int, bool]], n_classes: int) -> list[tuple[int, int, int]]:
    """``(label, certified, total)`` for every class from ``(label, certified)`` pairs."""
    tot = [0] * n_classes
    ok = [0] * n_classes
    for label, certified in flags:
        tot[label] += 1
        ok[label] += int(certified)
    return [(c, ok[c], tot[c]) for c in range(n_classes)]
