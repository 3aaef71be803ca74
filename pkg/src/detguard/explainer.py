"""Objectness explaining: match detections to the objectness map and alert on leftovers."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .detectors import BaseDetector, Detection
from .geometry import FeatureBox, ReceptiveFieldConfig, map_box_to_feature_space
from .local_model import LocalModel, extract_local_logits
from .objectness import PredictorConfig, predict_objectness_map


@dataclass(frozen=True)
class ClusterConfig:
    eps: float = 2.0
    min_points: int = 10

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.min_points < 1:
            raise ValueError(f"min_points must be >= 1, got {self.min_points}")


@lru_cache(maxsize=None)
def disc_offsets(eps: float) -> tuple[tuple[int, int], ...]:
    """Integer offsets within Euclidean distance ``eps`` (inclusive), origin included."""
    k = int(np.floor(eps))
    return tuple((di, dj) for di in range(-k, k + 1) for dj in range(-k, k + 1) if di * di + dj * dj <= eps * eps)


def neighbor_counts(points: np.ndarray, eps: float) -> np.ndarray:
    """Number of set cells within ``eps`` of every cell (itself included).

    Works on a single ``(X, Y)`` map or a batch ``(..., X, Y)``.
    """
    k = int(np.floor(eps))
    X, Y = points.shape[-2:]
    offsets = disc_offsets(eps)
    dtype = np.uint8 if len(offsets) < 256 else np.int64
    padded = np.zeros(points.shape[:-2] + (X + 2 * k, Y + 2 * k), dtype=dtype)
    padded[..., k:k + X, k:k + Y] = points
    out = np.zeros(points.shape, dtype=dtype)
    for di, dj in offsets:
        out += padded[..., k + di:k + di + X, k + dj:k + dj + Y]
    return out


def core_mask(points: np.ndarray, cfg: ClusterConfig) -> np.ndarray:
    points = np.asarray(points, dtype=bool)
    if points.size == 0:
        return points
    return points & (neighbor_counts(points, cfg.eps) >= cfg.min_points)


def has_cluster(points: np.ndarray, cfg: ClusterConfig) -> np.ndarray:
    """Whether DBSCAN finds any cluster, i.e. whether any core point exists.

    Returns a bool for one map or a bool array over leading batch dimensions.
    """
    points = np.asarray(points, dtype=bool)
    if points.size == 0:
        return np.zeros(points.shape[:-2], dtype=bool) if points.ndim > 2 else False
    core = core_mask(points, cfg)
    found = core.any(axis=(-2, -1))
    return bool(found) if points.ndim == 2 else found


def det_cluster(points: np.ndarray, cfg: ClusterConfig) -> Optional[list[list[tuple[int, int]]]]:
    """DBSCAN over the set cells of a binary map.

    Clusters are returned in discovery order (row-major over their first
    core cell), each as a row-major sorted list of cells. A border cell
    reachable from several clusters belongs to the first one discovered.
    Returns ``None`` when there is no cluster.
    """
    points = np.asarray(points, dtype=bool)
    if not points.any():
        return None
    core = core_mask(points, cfg)
    if not core.any():
        return None
    X, Y = points.shape
    offsets = disc_offsets(cfg.eps)
    label = np.full(points.shape, -1, dtype=np.int64)
    clusters: list[list[tuple[int, int]]] = []
    for i, j in zip(*np.nonzero(core)):
        if label[i, j] >= 0:
            continue
        cid = len(clusters)
        members = [(int(i), int(j))]
        label[i, j] = cid
        queue = deque([(i, j)])
        while queue:
            ci, cj = queue.popleft()
            for di, dj in offsets:
                ni, nj = ci + di, cj + dj
                if 0 <= ni < X and 0 <= nj < Y and points[ni, nj] and label[ni, nj] < 0:
                    label[ni, nj] = cid
                    members.append((int(ni), int(nj)))
                    if core[ni, nj]:
                        queue.append((ni, nj))
        clusters.append(sorted(members))
    return clusters


def explained_map(detections: Sequence[Detection], om: np.ndarray, rf: ReceptiveFieldConfig) -> np.ndarray:
    """Copy of ``om`` with every box region that holds objectness zeroed out."""
    om = np.asarray(om, dtype=bool)
    out = om.copy()
    for det in detections:
        fb = map_box_to_feature_space(det.box, rf)
        if fb.empty:
            continue
        sl = fb.slices()
        if om[sl].any():
            out[sl] = False
    return out


def explain(detections: Sequence[Detection], om: np.ndarray, cfg: ClusterConfig, rf: ReceptiveFieldConfig) -> bool:
    """``True`` when objectness is left unexplained by the detections (an attack alert)."""
    return bool(has_cluster(explained_map(detections, om, rf), cfg))


def explain_batch(boxes: Sequence[FeatureBox], oms: np.ndarray, cfg: ClusterConfig) -> np.ndarray:
    """Vectorised :func:`explain` over a batch of maps ``(V, X, Y)`` sharing one box list."""
    oms = np.asarray(oms, dtype=bool)
    out = oms.copy()
    for fb in boxes:
        if fb.empty:
            continue
        sl = (slice(None),) + fb.slices()
        hit = oms[sl].any(axis=(1, 2))
        out[(hit,) + fb.slices()] = False
    return has_cluster(out, cfg)


@dataclass(frozen=True)
class Verdict:
    """Either the base detector's detections or an alert."""

    detections: Optional[tuple[Detection, ...]]

    @property
    def alert(self) -> bool:
        return self.detections is None

    @classmethod
    def alarm(cls) -> "Verdict":
        return cls(None)


def detector_guard(image: np.ndarray, base: BaseDetector, model: LocalModel, pcfg: PredictorConfig,
                   ccfg: ClusterConfig, image_id: str = "", logits: Optional[np.ndarray] = None) -> Verdict:
    """Run the base detector and the objectness check; alert on a malicious mismatch."""
    detections = base.detect(image_id, image)
    if logits is None:
        logits = extract_local_logits(image, model)
    om = predict_objectness_map(logits, pcfg)
    rf = model.rf_config(image.shape[0], image.shape[1])
    if explain(detections, om, ccfg, rf):
        return Verdict.alarm()
    return Verdict(tuple(detections))
