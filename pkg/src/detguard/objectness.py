"""Sliding-window objectness prediction and its worst-case counterpart.

The per-cell accumulation of window logits is separable, so it is computed
as banded matrix products along each axis. Every function accepts optional
leading batch dimensions on the logits: shape ``(..., X, Y, N+1)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Union

import numpy as np

from .geometry import FeatureBox, footprint_mask


@dataclass(frozen=True)
class PredictorConfig:
    w_x: int = 4
    w_y: int = 4
    T: float = 8.0

    def __post_init__(self):
        if self.w_x < 1 or self.w_y < 1:
            raise ValueError(f"window {self.w_x}x{self.w_y} must be at least 1x1")
        if not self.T > 0:
            raise ValueError(f"binarizing threshold must be positive, got {self.T}")

    @property
    def cutoff(self) -> float:
        return self.T * self.w_x * self.w_y


def _check_window(shape: tuple[int, ...], cfg: PredictorConfig) -> None:
    X, Y = shape[-3], shape[-2]
    if cfg.w_x > X or cfg.w_y > Y:
        raise ValueError(f"window {cfg.w_x}x{cfg.w_y} larger than {X}x{Y} map")


@lru_cache(maxsize=64)
def band_matrix(n: int, w: int) -> np.ndarray:
    """``M[i, k]`` = number of valid length-``w`` windows holding both ``i`` and ``k``."""
    origins = np.arange(n - w + 1)
    member = (np.arange(n)[None, :] >= origins[:, None]) & (np.arange(n)[None, :] < origins[:, None] + w)
    m = member.astype(np.float64)
    out = m.T @ m
    out.flags.writeable = False
    return out


def accumulate(clipped: np.ndarray, w_x: int, w_y: int) -> np.ndarray:
    """Per-cell sum of the window vectors of every window containing the cell.

    ``clipped`` holds already clipped (non-negative) logits. Output has the
    same shape as the input. Accumulating window sums is a linear map per
    axis, so it is applied as two banded matrix products.
    """
    X, Y = clipped.shape[-3], clipped.shape[-2]
    r = np.tensordot(band_matrix(X, w_x), clipped, axes=([1], [-3]))  # (X, ..., Y, K)
    r = np.tensordot(band_matrix(Y, w_y), r, axes=([1], [-2]))  # (Y, X, ..., K)
    return np.moveaxis(r, (0, 1), (-2, -3))


def objectness_scores(logits: np.ndarray, cfg: PredictorConfig) -> np.ndarray:
    """Accumulated max non-background score per cell (before binarization)."""
    _check_window(logits.shape, cfg)
    acc = accumulate(np.maximum(logits, 0.0), cfg.w_x, cfg.w_y)
    return acc[..., :-1].max(axis=-1)


def binarize(scores: np.ndarray, cfg: PredictorConfig) -> np.ndarray:
    return scores > cfg.cutoff


def predict_objectness_map(logits: np.ndarray, cfg: PredictorConfig) -> np.ndarray:
    """Binary objectness map, ``True`` where the accumulated score exceeds ``T * w_x * w_y``."""
    return binarize(objectness_scores(logits, cfg), cfg)


Footprint = Union[np.ndarray, Iterable[tuple[int, int]], Iterable[FeatureBox]]


def as_mask(footprint: Optional[Footprint], shape: tuple[int, int]) -> np.ndarray:
    """Normalise a footprint (bool mask, cells, or feature boxes) into a bool mask."""
    if footprint is None:
        return np.zeros(shape, dtype=bool)
    if isinstance(footprint, np.ndarray) and footprint.dtype == bool:
        if footprint.shape != shape:
            raise ValueError(f"footprint mask {footprint.shape} does not match map {shape}")
        return footprint
    items = list(footprint)
    if items and isinstance(items[0], FeatureBox):
        return footprint_mask(items, shape)
    mask = np.zeros(shape, dtype=bool)
    for i, j in items:
        mask[i, j] = True
    return mask


def worst_case_objectness_map(logits: np.ndarray, footprint: Optional[Footprint],
                              cfg: PredictorConfig) -> np.ndarray:
    """Objectness map built from lower-bound window logits.

    Each window contributes its clipped sum over cells outside ``footprint``,
    the least an attacker controlling the footprint can leave behind.
    """
    _check_window(logits.shape, cfg)
    mask = as_mask(footprint, logits.shape[-3:-1])
    clipped = np.maximum(logits, 0.0)
    clipped[..., mask, :] = 0.0
    acc = accumulate(clipped, cfg.w_x, cfg.w_y)
    return binarize(acc[..., :-1].max(axis=-1), cfg)


def influence_region(fb: FeatureBox, X: int, Y: int, w_x: int, w_y: int) -> FeatureBox:
    """Cells whose accumulated score can change when cells in ``fb`` change."""
    return FeatureBox(max(0, fb.i_min - w_x + 1), max(0, fb.j_min - w_y + 1),
                      min(X, fb.i_max + w_x - 1), min(Y, fb.j_max + w_y - 1))


def footprint_contribution(clipped: np.ndarray, mask_region: np.ndarray, region: FeatureBox,
                           w_x: int, w_y: int) -> np.ndarray:
    """Accumulated score carried by the masked cells, restricted to ``region``.

    ``region`` must be the influence region of the mask's hull; every window
    touching the mask then lies inside it, so accumulating over the region
    alone reproduces the global contribution there (and it is zero outside).
    """
    local = clipped[region.slices()] * mask_region[..., None]
    return accumulate(local, w_x, w_y)
