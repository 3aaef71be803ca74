"""Provable analysis: per-object, per-patch-location worst-case checks.

For one image the clipped logits and their clean accumulation are computed
once (:class:`WorstCaseAnalyzer`). A patch location only changes the
accumulated scores inside the influence region of its footprint, so each
location costs one small local accumulation plus a cluster test on the
object's crop.
"""
from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .detectors import BaseDetector, Detection
from .explainer import ClusterConfig, detector_guard, has_cluster
from .geometry import (FeatureBox, PatchSpec, PixelBox, ReceptiveFieldConfig, Rect, chebyshev_gap,
                       footprint_boxes, footprint_mask, hull, iou, map_box_to_feature_space)
from .local_model import LocalModel, extract_local_logits
from .objectness import (PredictorConfig, accumulate, footprint_contribution, influence_region,
                         worst_case_objectness_map)

CATEGORIES = ("far", "close", "over")


@dataclass(frozen=True)
class ThreatModel:
    """Patch-location category relative to the victim object.

    ``over``: the patch lies entirely inside the object box. ``close``: not
    over, and the Chebyshev gap between the footprint hull and the object's
    feature box is below ``close_distance`` cells. ``far``: everything else.
    ``all`` selects every location.
    """

    category: str
    close_distance: int = 8

    def __post_init__(self):
        if self.category not in CATEGORIES + ("all",):
            raise ValueError(f"unknown threat category {self.category!r}")
        if self.close_distance <= 0:
            raise ValueError("close_distance must be positive")


@dataclass(frozen=True)
class Certificate:
    object: PixelBox
    category: str
    patch_size: tuple[int, int]
    n_locations: int
    certified: bool
    failing_location: Optional[Rect] = None
    clean_correct: bool = True

    def __post_init__(self):
        if self.certified and self.failing_location is not None:
            raise ValueError("a certified object cannot carry a failing location")


# --- location enumeration ------------------------------------------------

def _axis_footprints(n_pix: int, p: int, r: int, s: int, n_cells: int):
    starts = np.arange(0, n_pix - p + 1)
    lo = np.clip(-((r - 1 - starts) // s), 0, n_cells)
    hi = np.minimum(n_cells - 1, (starts + p - 1) // s) + 1
    return starts, lo, np.maximum(lo, hi)


def _axis_gap(lo, hi, o_min, o_max):
    gap = np.maximum(0, np.maximum(lo - o_max, o_min - hi)).astype(np.float64)
    gap[hi <= lo] = np.inf
    return gap


@dataclass(frozen=True)
class LocationGrid:
    """Every top-left patch position with its category code and footprint extent.

    ``code`` is 0 far, 1 close, 2 over; arrays are indexed ``[x, y]``.
    Footprints are ``[lo_x[x], hi_x[x]) x [lo_y[y], hi_y[y])``.
    """

    xs: np.ndarray
    ys: np.ndarray
    code: np.ndarray
    lo_x: np.ndarray
    hi_x: np.ndarray
    lo_y: np.ndarray
    hi_y: np.ndarray

    def key(self) -> np.ndarray:
        _, kx = np.unique(np.stack([self.lo_x, self.hi_x], 1), axis=0, return_inverse=True)
        _, ky = np.unique(np.stack([self.lo_y, self.hi_y], 1), axis=0, return_inverse=True)
        return kx.reshape(-1)[:, None] * (int(ky.max()) + 1) + ky.reshape(-1)[None, :]


def location_grid(patch_size: tuple[int, int], cfg: ReceptiveFieldConfig, obj: PixelBox,
                  close_distance: int) -> LocationGrid:
    px, py = patch_size
    if px > cfg.W or py > cfg.H:
        raise ValueError(f"patch {px}x{py} does not fit a {cfg.W}x{cfg.H} image")
    xs, lo_x, hi_x = _axis_footprints(cfg.W, px, cfg.r, cfg.s, cfg.X)
    ys, lo_y, hi_y = _axis_footprints(cfg.H, py, cfg.r, cfg.s, cfg.Y)
    ofb = map_box_to_feature_space(obj, cfg)
    inside_x = (xs >= obj.x_min) & (xs + px <= obj.x_max)
    inside_y = (ys >= obj.y_min) & (ys + py <= obj.y_max)
    over = inside_x[:, None] & inside_y[None, :]
    gap = np.maximum(_axis_gap(lo_x, hi_x, ofb.i_min, ofb.i_max)[:, None],
                     _axis_gap(lo_y, hi_y, ofb.j_min, ofb.j_max)[None, :])
    code = np.where(over, 2, np.where(gap < close_distance, 1, 0))
    return LocationGrid(xs, ys, code, lo_x, hi_x, lo_y, hi_y)


def _undominated(lo_x, hi_x, lo_y, hi_y) -> np.ndarray:
    """Mask of footprints not strictly contained in another one of the list."""
    inside = ((lo_x[None, :] <= lo_x[:, None]) & (hi_x[:, None] <= hi_x[None, :])
              & (lo_y[None, :] <= lo_y[:, None]) & (hi_y[:, None] <= hi_y[None, :]))
    same = ((lo_x[None, :] == lo_x[:, None]) & (hi_x[None, :] == hi_x[:, None])
            & (lo_y[None, :] == lo_y[:, None]) & (hi_y[None, :] == hi_y[:, None]))
    # inside[a, b]: footprint a lies within footprint b
    return ~(inside & ~same).any(axis=1)


def enumerate_patch_locations(patch_size: tuple[int, int], cfg: ReceptiveFieldConfig, obj: PixelBox,
                              tm: ThreatModel, prune_dominated: bool = True) -> list[Rect]:
    """Patch locations of one category, one per footprint, in ``(x, y)`` order.

    Of all positions sharing a footprint within the category, the first in
    lexicographic ``(x, y)`` order represents them. With
    ``prune_dominated``, footprints strictly inside another footprint of the
    same category are dropped as well: the worst case over a larger
    footprint is never better for the defender, so certifying the larger
    one covers the smaller.
    """
    g = location_grid(patch_size, cfg, obj, tm.close_distance)
    if tm.category == "all":
        sel = np.ones_like(g.code, dtype=bool)
    else:
        sel = g.code == CATEGORIES.index(tm.category)
    flat = np.flatnonzero(sel.ravel())
    if flat.size == 0:
        return []
    _, first = np.unique(g.key().ravel()[flat], return_index=True)
    reps = np.sort(flat[first])
    ny = len(g.ys)
    ix, iy = reps // ny, reps % ny
    if prune_dominated:
        keep = _undominated(g.lo_x[ix], g.hi_x[ix], g.lo_y[iy], g.hi_y[iy])
        ix, iy = ix[keep], iy[keep]
    px, py = patch_size
    return [Rect(int(g.xs[a]), int(g.ys[b]), px, py) for a, b in zip(ix, iy)]


def categorized_locations(patch_size: tuple[int, int], cfg: ReceptiveFieldConfig, obj: PixelBox,
                          close_distance: int, prune_dominated: bool = True) -> dict[str, list[Rect]]:
    return {c: enumerate_patch_locations(patch_size, cfg, obj, ThreatModel(c, close_distance), prune_dominated)
            for c in CATEGORIES}


# --- worst-case analysis --------------------------------------------------

def dg_pa_one(logits: np.ndarray, patch: PatchSpec, object_fbox: FeatureBox, pcfg: PredictorConfig,
              ccfg: ClusterConfig, rf: ReceptiveFieldConfig) -> bool:
    """Whether the worst-case objectness map keeps a cluster inside the object's feature box."""
    if object_fbox.empty:
        raise ValueError("object feature box is empty")
    om_star = worst_case_objectness_map(logits, footprint_boxes(patch, rf), pcfg)
    return bool(has_cluster(om_star[object_fbox.slices()], ccfg))


def _intersect(a: FeatureBox, b: FeatureBox) -> Optional[FeatureBox]:
    box = FeatureBox(max(a.i_min, b.i_min), max(a.j_min, b.j_min), min(a.i_max, b.i_max), min(a.j_max, b.j_max))
    return None if box.empty else box


class WorstCaseAnalyzer:
    """Reusable worst-case evaluation for one logits map."""

    def __init__(self, logits: np.ndarray, pcfg: PredictorConfig, ccfg: ClusterConfig, rf: ReceptiveFieldConfig):
        X, Y = logits.shape[:2]
        if (X, Y) != rf.feature_shape:
            raise ValueError(f"logits map {X}x{Y} does not match receptive-field grid {rf.feature_shape}")
        if pcfg.w_x > X or pcfg.w_y > Y:
            raise ValueError(f"window {pcfg.w_x}x{pcfg.w_y} larger than {X}x{Y} map")
        self.pcfg, self.ccfg, self.rf = pcfg, ccfg, rf
        self.X, self.Y = X, Y
        self.clipped = np.maximum(logits, 0.0)
        self.acc = accumulate(self.clipped, pcfg.w_x, pcfg.w_y)

    def object_view(self, obj: PixelBox) -> "ObjectView":
        return ObjectView(self, map_box_to_feature_space(obj, self.rf))


class ObjectView:
    """Worst-case checks for one object's feature box."""

    def __init__(self, analyzer: WorstCaseAnalyzer, fbox: FeatureBox):
        if fbox.empty:
            raise ValueError("object feature box is empty")
        self.a = analyzer
        self.fbox = fbox
        self.scores = analyzer.acc[fbox.slices()][..., :-1]
        self.clean = bool(has_cluster(self.scores.max(axis=-1) > analyzer.pcfg.cutoff, analyzer.ccfg))
        self._cache: dict = {}

    def verdict_boxes(self, boxes: Sequence[FeatureBox]) -> bool:
        a, crop = self.a, self.fbox
        h = hull(boxes)
        if h is None:
            return self.clean
        region = influence_region(h, a.X, a.Y, a.pcfg.w_x, a.pcfg.w_y)
        inter = _intersect(region, crop)
        if inter is None:
            return self.clean
        local_mask = footprint_mask(
            [FeatureBox(b.i_min - region.i_min, b.j_min - region.j_min, b.i_max - region.i_min, b.j_max - region.j_min)
             for b in boxes if not b.empty],
            (region.i_max - region.i_min, region.j_max - region.j_min))
        contrib = footprint_contribution(a.clipped, local_mask, region, a.pcfg.w_x, a.pcfg.w_y)
        scores = self.scores.copy()
        scores[inter.i_min - crop.i_min:inter.i_max - crop.i_min, inter.j_min - crop.j_min:inter.j_max - crop.j_min] -= \
            contrib[inter.i_min - region.i_min:inter.i_max - region.i_min,
                    inter.j_min - region.j_min:inter.j_max - region.j_min, :-1]
        return bool(has_cluster(scores.max(axis=-1) > a.pcfg.cutoff, a.ccfg))

    def verdict(self, patch: PatchSpec) -> bool:
        boxes = footprint_boxes(patch, self.a.rf)
        key = tuple(boxes)
        if key not in self._cache:
            self._cache[key] = self.verdict_boxes(boxes)
        return self._cache[key]

    def sweep(self, locations: Sequence[Rect]) -> np.ndarray:
        return np.array([self.verdict(PatchSpec((loc,))) for loc in locations], dtype=bool)


# --- parallel sweep --------------------------------------------------------

_WORKER_VIEW: Optional[ObjectView] = None


def _sweep_chunk(chunk: Sequence[Rect]) -> np.ndarray:
    return _WORKER_VIEW.sweep(chunk)


def parallel_sweep(view: ObjectView, locations: Sequence[Rect], jobs: int = 1) -> np.ndarray:
    """Per-location verdicts, optionally split across ``jobs`` forked workers.

    Output order matches ``locations`` whatever the job count.
    """
    if jobs <= 1 or len(locations) < 2:
        return view.sweep(locations)
    global _WORKER_VIEW
    _WORKER_VIEW = view
    n_chunks = min(len(locations), jobs * 4)
    chunks = [list(c) for c in np.array_split(np.arange(len(locations)), n_chunks)]
    ctx = mp.get_context("fork")
    try:
        with ctx.Pool(jobs) as pool:
            parts = pool.map(_sweep_chunk, [[locations[i] for i in c] for c in chunks])
    finally:
        _WORKER_VIEW = None
    return np.concatenate(parts)


def certify_locations(view: ObjectView, obj: PixelBox, category: str, patch_size: tuple[int, int],
                      locations: Sequence[Rect], jobs: int = 1) -> Certificate:
    """Conjunction of per-location verdicts; records the first failing location."""
    if jobs > 1:
        ok = parallel_sweep(view, locations, jobs)
        bad = np.flatnonzero(~ok)
        fail = locations[int(bad[0])] if bad.size else None
    else:
        fail = next((loc for loc in locations if not view.verdict(PatchSpec((loc,)))), None)
    return Certificate(obj, category, tuple(patch_size), len(locations), fail is None, fail)


# --- clean precondition and full analysis ---------------------------------

def clean_detection_correct(obj: PixelBox, detections: Optional[Sequence[Detection]], iou_threshold: float = 0.5) -> bool:
    """``detections`` is ``None`` for an alerted image."""
    if detections is None:
        return False
    return any(d.label == obj.label and iou(d.box, obj) >= iou_threshold for d in detections)


def dg_pa(image: np.ndarray, obj: PixelBox, locations: Sequence[Rect], model: LocalModel, base: BaseDetector,
          pcfg: PredictorConfig, ccfg: ClusterConfig, image_id: str = "", category: str = "all",
          iou_threshold: float = 0.5, logits: Optional[np.ndarray] = None, jobs: int = 1) -> Certificate:
    """Certify ``obj`` against every patch location in ``locations``."""
    if logits is None:
        logits = extract_local_logits(image, model)
    patch_size = (locations[0].p_x, locations[0].p_y) if locations else (0, 0)
    verdict = detector_guard(image, base, model, pcfg, ccfg, image_id=image_id, logits=logits)
    if not clean_detection_correct(obj, verdict.detections, iou_threshold):
        return Certificate(obj, category, patch_size, len(locations), False, None, clean_correct=False)
    rf = model.rf_config(image.shape[0], image.shape[1])
    view = WorstCaseAnalyzer(logits, pcfg, ccfg, rf).object_view(obj)
    return certify_locations(view, obj, category, patch_size, locations, jobs)


def robust_categories(view: ObjectView, obj: PixelBox, patch_size: tuple[int, int], close_distance: int,
                      categories: Iterable[str] = CATEGORIES) -> dict[str, Certificate]:
    """Worst-case certificates per category, ignoring the clean precondition."""
    out = {}
    for cat in categories:
        locs = enumerate_patch_locations(patch_size, view.a.rf, obj, ThreatModel(cat, close_distance))
        out[cat] = certify_locations(view, obj, cat, patch_size, locs)
    return out


def certified_recall(certificates: Sequence[Certificate], n_objects: Optional[int] = None) -> float:
    """Fraction of objects holding a certificate; ``n_objects`` defaults to the number of certificates."""
    total = len(certificates) if n_objects is None else n_objects
    if total == 0:
        return 0.0
    return sum(c.certified for c in certificates) / total
