"""Base-detector adapters, hiding-attack simulation and the auxiliary re-classifier."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence, Union

import numpy as np

from .geometry import PixelBox, iou, map_box_to_feature_space
from .local_model import extract_local_logits, rch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    box: PixelBox
    label: int
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.label < 0:
            raise ValueError(f"negative label {self.label}")

    @classmethod
    def from_values(cls, x_min, y_min, x_max, y_max, label, confidence=1.0) -> "Detection":
        return cls(PixelBox(int(x_min), int(y_min), int(x_max), int(y_max), int(label)), int(label), float(confidence))

    def relabel(self, label: int) -> "Detection":
        b = self.box
        return Detection(PixelBox(b.x_min, b.y_min, b.x_max, b.y_max, label), label, self.confidence)


class BaseDetector(Protocol):
    def detect(self, image_id: str, image: Optional[np.ndarray] = None) -> list[Detection]:
        ...


# --- interchange file -----------------------------------------------------

def format_record(image_id: str, det: Detection) -> str:
    b = det.box
    return f"{image_id} {b.x_min} {b.y_min} {b.x_max} {b.y_max} {det.label} {det.confidence!r}"


def _sort_key(item: tuple[str, Detection]):
    image_id, d = item
    return image_id, -d.confidence, d.box.as_tuple(), d.label


def write_detections(path: Union[str, Path], records: Mapping[str, Sequence[Detection]]) -> None:
    """Write ``image_id x_min y_min x_max y_max label confidence`` lines, ordered canonically."""
    items = [(image_id, d) for image_id, dets in records.items() for d in dets]
    items.sort(key=_sort_key)
    text = "".join(format_record(i, d) + "\n" for i, d in items)
    Path(path).write_text(text, encoding="utf-8")


def read_detections(path: Union[str, Path]) -> dict[str, list[Detection]]:
    """Parse an interchange file; records come back in canonical order per image."""
    out: dict[str, list[Detection]] = defaultdict(list)
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"{path}:{n}: expected 7 fields, got {len(parts)}")
        out[parts[0]].append(Detection.from_values(*parts[1:6], float(parts[6])))
    for image_id, dets in out.items():
        dets.sort(key=lambda d: _sort_key((image_id, d)))
    return dict(out)


# --- detectors ------------------------------------------------------------

class PerfectCleanDetector:
    """Returns the ground-truth boxes with confidence 1.0."""

    def __init__(self, annotations: Mapping[str, Sequence[PixelBox]]):
        self.annotations = annotations

    def detect(self, image_id: str, image: Optional[np.ndarray] = None) -> list[Detection]:
        return perfect_clean_detect(image_id, self.annotations)


def perfect_clean_detect(image_id: str, annotations: Mapping[str, Sequence[PixelBox]]) -> list[Detection]:
    if image_id not in annotations:
        raise KeyError(f"unknown image id {image_id!r}")
    return [Detection(b, b.label, 1.0) for b in annotations[image_id]]


class ExternalDetector:
    """Serves detections produced offline by another detector."""

    def __init__(self, records: Mapping[str, Sequence[Detection]], known_ids: Optional[Iterable[str]] = None):
        self.records = records
        self.known_ids = set(known_ids) if known_ids is not None else None

    @classmethod
    def from_file(cls, path: Union[str, Path], known_ids: Optional[Iterable[str]] = None) -> "ExternalDetector":
        return cls(read_detections(path), known_ids)

    def detect(self, image_id: str, image: Optional[np.ndarray] = None) -> list[Detection]:
        if self.known_ids is not None and image_id not in self.known_ids:
            raise KeyError(f"unknown image id {image_id!r}")
        return list(self.records.get(image_id, []))


class ThresholdedDetector:
    """Keeps only detections with confidence at or above ``threshold``."""

    def __init__(self, base: BaseDetector, threshold: float):
        self.base = base
        self.threshold = threshold

    def detect(self, image_id: str, image: Optional[np.ndarray] = None) -> list[Detection]:
        return [d for d in self.base.detect(image_id, image) if d.confidence >= self.threshold]


class HidingAttackDetector:
    """Wraps a detector, dropping every box that matches a victim.

    Boxes with IoU >= ``iou_threshold`` against any victim ground truth are
    removed; each remaining box is additionally dropped with probability
    ``drop_rate`` using a generator seeded per image.
    """

    def __init__(self, base: BaseDetector, victims: Mapping[str, Sequence[PixelBox]],
                 iou_threshold: float = 0.5, drop_rate: float = 0.0, seed: int = 0):
        self.base = base
        self.victims = victims
        self.iou_threshold = iou_threshold
        self.drop_rate = drop_rate
        self.seed = seed

    def detect(self, image_id: str, image: Optional[np.ndarray] = None) -> list[Detection]:
        dets = self.base.detect(image_id, image)
        victims = self.victims.get(image_id, ())
        kept = [d for d in dets if all(iou(d.box, v) < self.iou_threshold for v in victims)]
        if self.drop_rate > 0 and kept:
            rng = np.random.default_rng([self.seed, stable_hash(image_id)])
            keep = rng.random(len(kept)) >= self.drop_rate
            kept = [d for d, k in zip(kept, keep) if k]
        return kept


def stable_hash(text: str) -> int:
    h = 2166136261
    for ch in text.encode("utf-8"):
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


def simulate_hiding_attack(base: BaseDetector, victims: Mapping[str, Sequence[PixelBox]],
                           iou_threshold: float = 0.5, drop_rate: float = 0.0, seed: int = 0) -> HidingAttackDetector:
    return HidingAttackDetector(base, victims, iou_threshold, drop_rate, seed)


def aux_predictor(detections: Sequence[Detection], image: np.ndarray, model,
                  logits: Optional[np.ndarray] = None) -> tuple[list[Detection], int]:
    """Re-classify every box with the clipping head over its feature box.

    Boxes re-labelled as background are dropped; survivors carry the new
    label. Boxes whose feature box is empty are skipped. Returns
    ``(filtered, n_skipped)``.
    """
    if logits is None:
        logits = extract_local_logits(image, model)
    cfg = model.rf_config(image.shape[0], image.shape[1])
    background = logits.shape[-1] - 1
    out, skipped = [], 0
    for det in detections:
        fb = map_box_to_feature_space(det.box, cfg)
        if fb.empty:
            skipped += 1
            continue
        label, _ = rch(logits[fb.slices()])
        if label != background:
            out.append(det.relabel(label))
    if skipped:
        log.debug("aux predictor skipped %d degenerate boxes", skipped)
    return out, skipped
