"""Brute-force adversary used to validate certificates.

Feature-space variants overwrite the logits of footprint cells; pixel-space
variants overwrite patch pixels and recompute logits. Each variant is then
pushed through the full defense (objectness map, explanation over the whole
map, DBSCAN) together with several hiding-attack detector behaviours.
"""
from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .detectors import BaseDetector, Detection, HidingAttackDetector, stable_hash
from .explainer import ClusterConfig, explain_batch
from .geometry import (FeatureBox, PatchSpec, PixelBox, Rect, footprint_boxes, footprint_mask, hull, iou,
                       map_box_to_feature_space)
from .local_model import LocalModel, crop_logits, extract_local_logits, region_pixels
from .objectness import PredictorConfig, accumulate, band_matrix, influence_region, predict_objectness_map

FEATURE_STRATEGIES = ("worst", "uniform", "suppress")
PIXEL_STRATEGIES = ("random", "solid", "contrast")
BEHAVIOURS = ("drop-victim", "drop-random", "drop-all")
_LOW = -1.0e6


# --- variant generation -----------------------------------------------------

def footprint_assignments(clean: np.ndarray, strategies: Sequence[str], n_random: int,
                          rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
    """Adversarial values for the footprint cells, ``clean`` shaped ``(n, K)``.

    Returns ``(values, names)`` with ``values`` shaped ``(V, n, K)``.
    """
    n, K = clean.shape
    out, names = [], []
    for strat in strategies:
        if strat == "worst":
            out.append(np.full((1, n, K), _LOW))
            names.append("worst")
        elif strat == "uniform":
            span = 2.0 * float(np.abs(clean).max(initial=1.0)) + 1.0
            out.append(rng.uniform(-span, span, size=(n_random, n, K)))
            names += ["uniform"] * n_random
        elif strat == "suppress":
            for c in range(K - 1):
                v = clean.copy()
                v[:, c] = _LOW
                out.append(v[None])
                names.append(f"suppress-{c}")
            v = np.full((n, K), _LOW)
            v[:, -1] = float(np.abs(clean).max(initial=1.0)) * 10.0
            out.append(v[None])
            names.append("suppress-all")
        else:
            raise ValueError(f"unknown feature strategy {strat!r}")
    if not out:
        return np.zeros((0, n, K)), []
    return np.concatenate(out, axis=0), names


def feature_space_attack(logits: np.ndarray, footprint: Iterable[tuple[int, int]],
                         strategies: Sequence[str] = FEATURE_STRATEGIES, n_random: int = 100,
                         seed: int = 0) -> list[np.ndarray]:
    """Modified logits maps, every change confined to ``footprint``.

    An empty footprint yields only the unmodified map.
    """
    cells = sorted(set(footprint))
    if not cells:
        return [logits.copy()]
    idx = tuple(np.array(cells).T)
    values, _ = footprint_assignments(logits[idx], strategies, n_random, np.random.default_rng(seed))
    out = []
    for v in values:
        m = logits.copy()
        m[idx] = v
        out.append(m)
    return out


def _patch_contents(n_pix: int, channels: int, strategies: Sequence[str], n_variants: int,
                    rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for k in range(n_variants):
        strat = strategies[k % len(strategies)]
        if strat == "random":
            content = rng.random((n_pix, channels))
        elif strat == "solid":
            content = np.broadcast_to(rng.integers(0, 2, size=channels).astype(np.float64), (n_pix, channels))
        elif strat == "contrast":
            content = rng.integers(0, 2, size=(n_pix, 1)).astype(np.float64).repeat(channels, axis=1)
        else:
            raise ValueError(f"unknown pixel strategy {strat!r}")
        out.append(content)
    return out


def pixel_space_attack(image: np.ndarray, patch: PatchSpec, strategies: Sequence[str] = PIXEL_STRATEGIES,
                       n_variants: int = 20, seed: int = 0) -> list[np.ndarray]:
    """Images whose patch pixels are overwritten; all other pixels are untouched.

    ``n_variants`` are spread round-robin over ``strategies``: uniform random
    pixels, a solid corner-of-the-cube colour, or black/white noise.
    """
    if not strategies or n_variants <= 0:
        return []
    W, H = image.shape[:2]
    patch.validate(W, H)
    mask = patch.pixel_mask(W, H)
    out = []
    for content in _patch_contents(int(mask.sum()), image.shape[2], strategies, n_variants,
                                   np.random.default_rng(seed)):
        variant = image.copy()
        variant[mask] = content
        out.append(variant)
    return out


# --- batched evaluation -----------------------------------------------------

@dataclass(frozen=True)
class Violation:
    image_id: str
    object_id: int
    patch_x: int
    patch_y: int
    strategy: str
    outcome: str


@dataclass
class SoundnessStats:
    locations: int = 0
    variants: int = 0
    checks: int = 0
    violations: list[Violation] = field(default_factory=list)

    def merge(self, other: "SoundnessStats") -> None:
        self.locations += other.locations
        self.variants += other.variants
        self.checks += other.checks
        self.violations += other.violations


class ImageAttacker:
    """Evaluates attack variants on one image against the full defense."""

    def __init__(self, image: np.ndarray, image_id: str, model: LocalModel, base: BaseDetector,
                 objects: Sequence[PixelBox], pcfg: PredictorConfig, ccfg: ClusterConfig,
                 n_feature: int = 100, n_pixel: int = 20, seed: int = 0, drop_rate: float = 0.5,
                 iou_threshold: float = 0.5, exact: bool = False):
        self.image, self.image_id, self.model = image, image_id, model
        self.objects = list(objects)
        self.pcfg, self.ccfg = pcfg, ccfg
        self.n_feature, self.n_pixel, self.seed = n_feature, n_pixel, seed
        self.exact = exact
        self.rf = model.rf_config(image.shape[0], image.shape[1])
        self.logits = extract_local_logits(image, model)
        self.clipped = np.maximum(self.logits, 0.0)
        self.acc = accumulate(self.clipped, pcfg.w_x, pcfg.w_y)
        self.om = self.acc[..., :-1].max(axis=-1) > pcfg.cutoff
        # per victim, the detector outputs of every behaviour
        self.behaviours: list[list[tuple[str, list[Detection]]]] = []
        for k, obj in enumerate(self.objects):
            victims = {image_id: [obj]}
            rows = [
                ("drop-victim", HidingAttackDetector(base, victims, iou_threshold).detect(image_id, image)),
                ("drop-random", HidingAttackDetector(base, victims, iou_threshold, drop_rate,
                                                     seed=seed * 1000 + k).detect(image_id, image)),
                ("drop-all", []),
            ]
            self.behaviours.append(rows)

    def _variant_logits(self, patch: PatchSpec, box: FeatureBox, mask: np.ndarray, rng: np.random.Generator):
        """Logits of every variant over ``box`` (``(V, a, b, K)``) and the variant names."""
        sl = box.slices()
        clean_box = self.logits[sl]
        cells = clean_box[mask]
        values, names = footprint_assignments(cells, FEATURE_STRATEGIES, self.n_feature, rng)
        feat = np.broadcast_to(clean_box, (len(values),) + clean_box.shape).copy()
        feat[:, mask] = values
        # pixel variants only need the pixels seen by the footprint cells
        px, py = region_pixels(box, self.model)
        crop = self.image[px, py]
        W, H = self.image.shape[:2]
        pmask = patch.pixel_mask(W, H)[px, py]
        contents = _patch_contents(int(pmask.sum()), crop.shape[-1], PIXEL_STRATEGIES, self.n_pixel, rng)
        if contents:
            crops = np.broadcast_to(crop, (len(contents),) + crop.shape).copy()
            for c, content in zip(crops, contents):
                c[pmask] = content
            feat = np.concatenate([feat, crop_logits(crops, self.model)], axis=0)
            names += [f"pixel-{PIXEL_STRATEGIES[k % len(PIXEL_STRATEGIES)]}" for k in range(len(contents))]
        return feat, names

    def objectness_maps(self, patch: PatchSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
        """Objectness maps ``(V, X, Y)`` of all variants for one patch location."""
        boxes = [b for b in footprint_boxes(patch, self.rf) if not b.empty]
        box = hull(boxes)
        if box is None:
            return self.om[None].copy(), ["none"]
        mask = footprint_mask([FeatureBox(b.i_min - box.i_min, b.j_min - box.j_min, b.i_max - box.i_min,
                                          b.j_max - box.j_min) for b in boxes],
                              (box.i_max - box.i_min, box.j_max - box.j_min))
        variants, names = self._variant_logits(patch, box, mask, rng)
        if self.exact:
            full = np.broadcast_to(self.logits, (len(variants),) + self.logits.shape).copy()
            full[(slice(None),) + box.slices()] = variants
            return predict_objectness_map(full, self.pcfg), names
        # accumulation is linear: add the change carried by the footprint cells
        delta = np.maximum(variants, 0.0) - self.clipped[box.slices()]
        X, Y = self.om.shape
        region = influence_region(box, X, Y, self.pcfg.w_x, self.pcfg.w_y)
        mx = band_matrix(X, self.pcfg.w_x)[region.i_min:region.i_max, box.i_min:box.i_max]
        my = band_matrix(Y, self.pcfg.w_y)[region.j_min:region.j_max, box.j_min:box.j_max]
        d = np.tensordot(mx, delta, axes=([1], [1]))  # (Ri, V, b, K)
        d = np.tensordot(my, d, axes=([1], [2]))  # (Rj, Ri, V, K)
        scores = self.acc[region.slices()][None] + d.transpose(2, 1, 0, 3)
        oms = np.broadcast_to(self.om, (len(variants),) + self.om.shape).copy()
        oms[(slice(None),) + region.slices()] = scores[..., :-1].max(axis=-1) > self.pcfg.cutoff
        return oms, names

    def check(self, patch: PatchSpec, victims: Sequence[int], rng: np.random.Generator) -> SoundnessStats:
        """Run all variants at one location against each victim and behaviour."""
        stats = SoundnessStats(locations=1)
        oms, names = self.objectness_maps(patch, rng)
        stats.variants = len(names)
        rect = patch.rectangles[0]
        alerts: dict[tuple, np.ndarray] = {}
        for k in victims:
            obj = self.objects[k]
            for behaviour, dets in self.behaviours[k]:
                fboxes = tuple(map_box_to_feature_space(d.box, self.rf) for d in dets)
                if fboxes not in alerts:
                    alerts[fboxes] = explain_batch(fboxes, oms, self.ccfg)
                alert = alerts[fboxes]
                detected = any(iou(d.box, obj) > 0 for d in dets)
                stats.checks += len(names)
                if detected:
                    continue
                for v in np.flatnonzero(~alert):
                    stats.violations.append(Violation(self.image_id, k, rect.x, rect.y,
                                                      f"{names[v]}/{behaviour}", "undetected-no-alert"))
        return stats


def attack_image(attacker: ImageAttacker, certified: Mapping[int, Sequence[Rect]]) -> SoundnessStats:
    """Attack every certified location of every certified object on one image.

    A location shared by several objects is evaluated once against all of them.
    """
    by_loc: dict[Rect, list[int]] = {}
    for k in sorted(certified):
        for loc in certified[k]:
            by_loc.setdefault(loc, []).append(k)
    stats = SoundnessStats()
    rng = np.random.default_rng([attacker.seed, stable_hash(attacker.image_id)])
    for loc in sorted(by_loc):
        stats.merge(attacker.check(PatchSpec((loc,)), by_loc[loc], rng))
    return stats


# --- parallel driver --------------------------------------------------------

_JOBS_STATE: dict = {}


def _attack_one(task) -> SoundnessStats:
    image_id, certified = task
    st = _JOBS_STATE
    attacker = ImageAttacker(st["images"][image_id], image_id, st["model"], st["base"],
                             st["annotations"][image_id], st["pcfg"], st["ccfg"], **st["kwargs"])
    return attack_image(attacker, certified)


def run_soundness(images: Mapping[str, np.ndarray], annotations: Mapping[str, Sequence[PixelBox]],
                  certified: Mapping[str, Mapping[int, Sequence[Rect]]], model: LocalModel, base: BaseDetector,
                  pcfg: PredictorConfig, ccfg: ClusterConfig, jobs: int = 1, **kwargs) -> SoundnessStats:
    """Attack every certified (image, object, location); results in canonical image order."""
    _JOBS_STATE.update(images=images, annotations=annotations, model=model, base=base, pcfg=pcfg, ccfg=ccfg,
                       kwargs=kwargs)
    tasks = [(i, certified[i]) for i in sorted(certified) if certified[i]]
    try:
        if jobs > 1 and len(tasks) > 1:
            with mp.get_context("fork").Pool(jobs) as pool:
                parts = pool.map(_attack_one, tasks, chunksize=1)
        else:
            parts = [_attack_one(t) for t in tasks]
    finally:
        _JOBS_STATE.clear()
    total = SoundnessStats()
    for p in parts:
        total.merge(p)
    return total
