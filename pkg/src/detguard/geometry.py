"""Coordinate systems, boxes, receptive-field arithmetic and patch footprints.

Conventions used throughout the package:

* images are arrays indexed ``[x, y, channel]`` with shape ``(W, H, C)``;
* feature maps are indexed ``[i, j, ...]`` with shape ``(X, Y, ...)``;
* every box is half-open, ``[min, max)``, in both pixel and feature space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional

import numpy as np


@dataclass(frozen=True)
class ReceptiveFieldConfig:
    """Receptive field side ``r`` and stride ``s`` over a ``W x H`` image."""

    r: int
    s: int
    W: int
    H: int

    def __post_init__(self):
        if self.r < 1 or self.s < 1:
            raise ValueError(f"receptive field r={self.r}, s={self.s} must be >= 1")
        if self.W < self.r or self.H < self.r:
            raise ValueError(f"image {self.W}x{self.H} smaller than receptive field {self.r}")

    @property
    def X(self) -> int:
        return (self.W - self.r) // self.s + 1

    @property
    def Y(self) -> int:
        return (self.H - self.r) // self.s + 1

    @property
    def feature_shape(self) -> tuple[int, int]:
        return self.X, self.Y

    def field_of(self, i: int, j: int) -> "PixelBox":
        """Pixel region seen by feature cell ``(i, j)``."""
        return PixelBox(i * self.s, j * self.s, i * self.s + self.r, j * self.s + self.r)


@dataclass(frozen=True)
class PixelBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int
    label: Optional[int] = None

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.x_min, self.y_min, self.x_max, self.y_max

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def contains(self, other: "PixelBox") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and other.x_max <= self.x_max and other.y_max <= self.y_max)

    def within(self, W: int, H: int) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= W and self.y_max <= H


class FeatureBox(NamedTuple):
    i_min: int
    j_min: int
    i_max: int
    j_max: int

    @property
    def empty(self) -> bool:
        return self.i_max <= self.i_min or self.j_max <= self.j_min

    @property
    def n_cells(self) -> int:
        return 0 if self.empty else (self.i_max - self.i_min) * (self.j_max - self.j_min)

    def slices(self) -> tuple[slice, slice]:
        return slice(self.i_min, self.i_max), slice(self.j_min, self.j_max)

    def cells(self) -> set[tuple[int, int]]:
        return {(i, j) for i in range(self.i_min, self.i_max) for j in range(self.j_min, self.j_max)}


class Rect(NamedTuple):
    """Pixel rectangle given by its top-left corner and size."""

    x: int
    y: int
    p_x: int
    p_y: int

    def box(self) -> PixelBox:
        return PixelBox(self.x, self.y, self.x + self.p_x, self.y + self.p_y)


@dataclass(frozen=True)
class PatchSpec:
    """One or more pixel rectangles the attacker controls."""

    rectangles: tuple[Rect, ...]

    def __post_init__(self):
        if not self.rectangles:
            raise ValueError("a patch needs at least one rectangle")
        for rect in self.rectangles:
            if rect.p_x < 1 or rect.p_y < 1:
                raise ValueError(f"empty patch rectangle {tuple(rect)}")

    @classmethod
    def single(cls, x: int, y: int, p_x: int, p_y: int) -> "PatchSpec":
        return cls((Rect(x, y, p_x, p_y),))

    def validate(self, W: int, H: int) -> None:
        for rect in self.rectangles:
            if rect.x < 0 or rect.y < 0 or rect.x + rect.p_x > W or rect.y + rect.p_y > H:
                raise ValueError(f"patch rectangle {tuple(rect)} outside {W}x{H} image")

    def pixel_mask(self, W: int, H: int) -> np.ndarray:
        mask = np.zeros((W, H), dtype=bool)
        for x, y, px, py in self.rectangles:
            mask[x:x + px, y:y + py] = True
        return mask


def _clamp(v: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, v))


def map_box_to_feature_space(box: PixelBox, cfg: ReceptiveFieldConfig) -> FeatureBox:
    """Feature cells affected by the pixels of ``box``.

    The lower end uses the conservative floor ``(min - r + 1) // s``; the
    exclusive upper end is ``(max - 1) // s + 1`` (the inclusive formula
    translated to half-open boxes). Results are clamped into the map.
    """
    r, s = cfg.r, cfg.s
    i_min = _clamp((box.x_min - r + 1) // s, 0, cfg.X)
    j_min = _clamp((box.y_min - r + 1) // s, 0, cfg.Y)
    i_max = _clamp((box.x_max - 1) // s + 1, 0, cfg.X)
    j_max = _clamp((box.y_max - 1) // s + 1, 0, cfg.Y)
    return FeatureBox(i_min, j_min, max(i_min, i_max), max(j_min, j_max))


def footprint_range(start: int, size: int, r: int, s: int, n: int) -> tuple[int, int]:
    """Exact half-open range of cells along one axis whose field meets ``[start, start+size)``."""
    lo = min(n, max(0, -((r - 1 - start) // s)))  # ceil((start - r + 1) / s)
    hi = min(n - 1, (start + size - 1) // s)
    return lo, max(lo, hi + 1)


def footprint_boxes(patch: PatchSpec, cfg: ReceptiveFieldConfig) -> list[FeatureBox]:
    """Per-rectangle footprints as feature boxes (possibly empty)."""
    out = []
    for x, y, px, py in patch.rectangles:
        i0, i1 = footprint_range(x, px, cfg.r, cfg.s, cfg.X)
        j0, j1 = footprint_range(y, py, cfg.r, cfg.s, cfg.Y)
        out.append(FeatureBox(i0, j0, i1, j1))
    return out


def corrupted_footprint(patch: PatchSpec, cfg: ReceptiveFieldConfig) -> frozenset[tuple[int, int]]:
    """Set of feature cells whose receptive field intersects any patch rectangle."""
    cells: set[tuple[int, int]] = set()
    for fb in footprint_boxes(patch, cfg):
        cells |= fb.cells()
    return frozenset(cells)


def footprint_mask(boxes: Iterable[FeatureBox], shape: tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for fb in boxes:
        if not fb.empty:
            mask[fb.slices()] = True
    return mask


def corruption_bound(p: int, cfg_or_r, s: Optional[int] = None) -> int:
    """Per-dimension bound ``ceil((p + r - 1) / s)`` on corrupted cells.

    Accepts either a :class:`ReceptiveFieldConfig` or explicit ``r, s``.
    """
    if p < 1:
        raise ValueError("patch size must be >= 1")
    if isinstance(cfg_or_r, ReceptiveFieldConfig):
        r, s = cfg_or_r.r, cfg_or_r.s
    else:
        r = cfg_or_r
    return math.ceil((p + r - 1) / s)


def iou(a: PixelBox, b: PixelBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def hull(boxes: Iterable[FeatureBox]) -> Optional[FeatureBox]:
    boxes = [b for b in boxes if not b.empty]
    if not boxes:
        return None
    return FeatureBox(min(b.i_min for b in boxes), min(b.j_min for b in boxes),
                      max(b.i_max for b in boxes), max(b.j_max for b in boxes))


def chebyshev_gap(a: FeatureBox, b: FeatureBox) -> int:
    """Number of empty cells between two boxes along the worse axis; 0 when touching or overlapping."""
    gx = max(0, a.i_min - b.i_max, b.i_min - a.i_max)
    gy = max(0, a.j_min - b.j_max, b.j_min - a.j_max)
    return max(gx, gy)
