"""Dataset-level runs: verdict sweeps, certification and certified recall."""
from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .certifier import (CATEGORIES, Certificate, ThreatModel, WorstCaseAnalyzer, certified_recall,
                        certify_locations, clean_detection_correct, enumerate_patch_locations)
from .detectors import BaseDetector, ThresholdedDetector
from .evaluation import EvalConfig, EvalReport, VerdictRecord, default_grid, evaluate, operating_point, sweep
from .explainer import ClusterConfig, explain
from .local_model import LocalModel, extract_local_logits
from .objectness import PredictorConfig, predict_objectness_map
from .synthdata import Dataset


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run; written to and read from ``key = value`` files."""

    r: int = 9
    s: int = 4
    n_proj: int = 6
    epochs: int = 300
    learning_rate: float = 1.0
    seed: int = 0
    w_x: int = 4
    w_y: int = 4
    T: float = 110.0
    eps: float = 2.0
    min_points: int = 10
    iou_threshold: float = 0.5
    conf_grid: tuple[float, ...] = field(default_factory=default_grid)
    anchor: float = 0.8
    close_distance: int = 4
    n_feature_variants: int = 100
    n_pixel_variants: int = 20
    drop_rate: float = 0.5

    def __post_init__(self):
        # build every sub-config once so bad values fail at load time
        self.pcfg, self.ccfg, self.eval_cfg
        ThreatModel("all", self.close_distance)

    @property
    def pcfg(self) -> PredictorConfig:
        return PredictorConfig(self.w_x, self.w_y, self.T)

    @property
    def ccfg(self) -> ClusterConfig:
        return ClusterConfig(self.eps, self.min_points)

    @property
    def eval_cfg(self) -> EvalConfig:
        return EvalConfig(self.iou_threshold, tuple(self.conf_grid), self.anchor)


@dataclass(frozen=True)
class CertRow:
    image_id: str
    object_id: int
    certificate: Certificate

    @property
    def label(self) -> int:
        return self.certificate.object.label


class Suite:
    """A dataset, a trained model and a base detector under one run config."""

    def __init__(self, dataset: Dataset, model: LocalModel, base: BaseDetector, cfg: RunConfig,
                 logits: Optional[dict] = None):
        self.dataset, self.model, self.base, self.cfg = dataset, model, base, cfg
        self._logits = logits if logits is not None else {}
        self._om: dict = {}

    def with_config(self, cfg: RunConfig) -> "Suite":
        """Same data and model under another config, sharing the logits cache."""
        return Suite(self.dataset, self.model, self.base, cfg, self._logits)

    def logits(self, image_id: str) -> np.ndarray:
        if image_id not in self._logits:
            self._logits[image_id] = extract_local_logits(self.dataset.images[image_id], self.model)
        return self._logits[image_id]

    def objectness(self, image_id: str) -> np.ndarray:
        if image_id not in self._om:
            self._om[image_id] = predict_objectness_map(self.logits(image_id), self.cfg.pcfg)
        return self._om[image_id]

    def verdict(self, image_id: str, threshold: float) -> VerdictRecord:
        image = self.dataset.images[image_id]
        dets = ThresholdedDetector(self.base, threshold).detect(image_id, image)
        rf = self.model.rf_config(image.shape[0], image.shape[1])
        alert = explain(dets, self.objectness(image_id), self.cfg.ccfg, rf)
        return VerdictRecord(image_id, threshold, tuple(dets), alert)

    def verdicts(self, thresholds: Optional[Sequence[float]] = None) -> list[VerdictRecord]:
        grid = self.cfg.conf_grid if thresholds is None else thresholds
        return [self.verdict(i, t) for i in self.dataset.ids for t in grid]

    def evaluate(self) -> EvalReport:
        return evaluate(self.verdicts(), self.dataset.annotations, self.cfg.eval_cfg)

    def operating_threshold(self) -> float:
        return evaluate_threshold(self.verdicts(), self)

    def certify_image(self, image_id: str, patch_size: tuple[int, int], categories: Sequence[str],
                      threshold: float) -> list[CertRow]:
        rec = self.verdict(image_id, threshold)
        image = self.dataset.images[image_id]
        rf = self.model.rf_config(image.shape[0], image.shape[1])
        analyzer = WorstCaseAnalyzer(self.logits(image_id), self.cfg.pcfg, self.cfg.ccfg, rf)
        rows = []
        for k, obj in enumerate(self.dataset.annotations[image_id]):
            ok = clean_detection_correct(obj, rec.defended, self.cfg.iou_threshold)
            view = analyzer.object_view(obj) if ok else None
            for cat in categories:
                locs = enumerate_patch_locations(patch_size, rf, obj, ThreatModel(cat, self.cfg.close_distance))
                if ok:
                    cert = certify_locations(view, obj, cat, patch_size, locs)
                else:
                    cert = Certificate(obj, cat, tuple(patch_size), len(locs), False, None, clean_correct=False)
                rows.append(CertRow(image_id, k, cert))
        return rows

    def certify(self, patch_size: tuple[int, int], categories: Sequence[str] = CATEGORIES,
                threshold: Optional[float] = None, jobs: int = 1) -> list[CertRow]:
        """Certificates for every (image, object, category), in canonical order."""
        if threshold is None:
            threshold = self.operating_threshold()
        for i in self.dataset.ids:
            self.logits(i)
        if jobs > 1 and len(self.dataset) > 1:
            _POOL_STATE.update(suite=self, args=(tuple(patch_size), tuple(categories), threshold))
            try:
                with mp.get_context("fork").Pool(jobs) as pool:
                    parts = pool.map(_certify_worker, self.dataset.ids, chunksize=max(1, len(self.dataset) // (4 * jobs)))
            finally:
                _POOL_STATE.clear()
        else:
            parts = [self.certify_image(i, tuple(patch_size), categories, threshold) for i in self.dataset.ids]
        return [row for part in parts for row in part]


_POOL_STATE: dict = {}


def _certify_worker(image_id: str) -> list[CertRow]:
    suite = _POOL_STATE["suite"]
    return suite.certify_image(image_id, *_POOL_STATE["args"])


def evaluate_threshold(records: Sequence[VerdictRecord], suite: Suite) -> float:
    points = sweep(records, suite.dataset.annotations, suite.cfg.eval_cfg)
    return operating_point(points, suite.cfg.anchor).point.threshold


def recall_by_category(rows: Sequence[CertRow], n_objects: int) -> dict[str, float]:
    out = {}
    for cat in dict.fromkeys(r.certificate.category for r in rows):
        out[cat] = certified_recall([r.certificate for r in rows if r.certificate.category == cat], n_objects)
    return out


def with_values(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, **changes)
