"""Deterministic synthetic scenes: textured rectangles and ellipses on noisy backgrounds."""
from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .detectors import Detection, read_detections, write_detections
from .geometry import PixelBox, ReceptiveFieldConfig, chebyshev_gap, map_box_to_feature_space
from .kvconfig import dump_kv, load_kv
from .local_model import LocalModel, window_descriptors
from .netpbm import read_ppm, to_float, write_ppm

ANNOTATIONS = "annotations.txt"
MANIFEST = "manifest.txt"
SCENE = "scene.txt"
IMAGE_DIR = "images"


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    n_classes: int = 3
    n_images: int = 200
    min_objects: int = 1
    max_objects: int = 3
    # object side lengths in pixels
    min_size: int = 32
    max_size: int = 72
    ellipse_fraction: float = 0.5
    seed: int = 0
    background_seed: int = 7
    # objects' feature boxes under (sep_r, sep_s) keep at least sep_gap empty cells between them
    sep_r: int = 9
    sep_s: int = 4
    sep_gap: int = 1
    max_retries: int = 500

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if self.n_classes < 1:
            raise ValueError("need at least one class")
        if self.n_images < 0 or self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ValueError("bad image or object counts")
        if not 1 <= self.min_size <= self.max_size or self.max_size > min(self.width, self.height):
            raise ValueError(f"object size range {self.min_size}..{self.max_size} does not fit the image")
        if not 0.0 <= self.ellipse_fraction <= 1.0:
            raise ValueError("ellipse_fraction must lie in [0, 1]")


@dataclass
class Dataset:
    ids: list[str]
    images: dict[str, np.ndarray]
    annotations: dict[str, list[PixelBox]]
    n_classes: int

    def __len__(self) -> int:
        return len(self.ids)

    def items(self) -> list[tuple[np.ndarray, list[PixelBox]]]:
        return [(self.images[i], self.annotations[i]) for i in self.ids]

    def n_objects(self) -> int:
        return sum(len(self.annotations[i]) for i in self.ids)

    def subset(self, ids: Sequence[str]) -> "Dataset":
        return Dataset(list(ids), {i: self.images[i] for i in ids}, {i: self.annotations[i] for i in ids},
                       self.n_classes)


def image_id(index: int) -> str:
    return f"img_{index:05d}"


def class_style(label: int, n_classes: int) -> tuple[np.ndarray, float, int]:
    """Base colour, texture amplitude and texture grain (pixels) of a class."""
    hue = label / max(n_classes, 1)
    color = np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.9))
    amplitude = 0.06 + 0.06 * (label % 3)
    grain = 3 + 3 * (label % 2)
    return color, amplitude, grain


def value_noise(rng: np.random.Generator, W: int, H: int, grain: int) -> np.ndarray:
    """Smooth noise in [-0.5, 0.5]: a coarse random grid, bilinearly upsampled."""
    gw, gh = W // grain + 2, H // grain + 2
    coarse = rng.random((gw, gh)) - 0.5
    return ndimage.zoom(coarse, grain, order=1)[:W, :H]


def _object_mask(box: PixelBox, ellipse: bool) -> np.ndarray:
    w, h = box.x_max - box.x_min, box.y_max - box.y_min
    if not ellipse:
        return np.ones((w, h), dtype=bool)
    u = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    v = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    return u[:, None] ** 2 + v[None, :] ** 2 <= 1.0


def _place(rng: np.random.Generator, spec: SceneSpec, n: int, index: int) -> list[tuple[int, int, int, int]]:
    """Random layout of ``n`` separated boxes; whole layouts are redrawn on failure."""
    rf = ReceptiveFieldConfig(spec.sep_r, spec.sep_s, spec.width, spec.height)
    for _layout in range(spec.max_retries):
        placed: list[PixelBox] = []
        fboxes = []
        for _ in range(n):
            for _attempt in range(20):
                w, h = (int(v) for v in rng.integers(spec.min_size, spec.max_size + 1, size=2))
                x = int(rng.integers(0, spec.width - w + 1))
                y = int(rng.integers(0, spec.height - h + 1))
                box = PixelBox(x, y, x + w, y + h)
                fb = map_box_to_feature_space(box, rf)
                if all(chebyshev_gap(fb, o) >= spec.sep_gap for o in fboxes):
                    placed.append(box)
                    fboxes.append(fb)
                    break
            else:
                break
        if len(placed) == n:
            return [b.as_tuple() for b in placed]
    raise RuntimeError(f"image {index}: could not place {n} objects within {spec.max_retries} layouts")


def render_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, list[PixelBox]]:
    """One uint8 image ``(W, H, 3)`` and its tight, labelled boxes."""
    rng = np.random.default_rng([spec.seed, index])
    bg_rng = np.random.default_rng([spec.background_seed, spec.seed, index])
    W, H = spec.width, spec.height
    level = bg_rng.uniform(0.3, 0.6)
    tint = bg_rng.uniform(-0.04, 0.04, size=3)
    noise = value_noise(bg_rng, W, H, 8)
    image = level + tint[None, None, :] + 0.12 * noise[..., None]
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes = []
    for x0, y0, x1, y1 in _place(rng, spec, n, index):
        label = int(rng.integers(0, spec.n_classes))
        ellipse = bool(rng.random() < spec.ellipse_fraction)
        color, amplitude, grain = class_style(label, spec.n_classes)
        color = np.clip(color + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
        mask = _object_mask(PixelBox(x0, y0, x1, y1), ellipse)
        tex = value_noise(rng, x1 - x0, y1 - y0, grain)
        patch = color[None, None, :] + amplitude * 2 * tex[..., None]
        region = image[x0:x1, y0:y1]
        region[mask] = patch[mask]
        xs, ys = np.nonzero(mask)
        boxes.append(PixelBox(x0 + int(xs.min()), y0 + int(ys.min()), x0 + int(xs.max()) + 1, y0 + int(ys.max()) + 1,
                              label))
    boxes.sort(key=lambda b: (b.as_tuple(), b.label))
    return (np.clip(np.rint(image * 255.0), 0, 255)).astype(np.uint8), boxes


def generate(spec: SceneSpec) -> tuple[list[str], list[np.ndarray], dict[str, list[PixelBox]]]:
    """Ids, uint8 images and annotations of the whole dataset."""
    ids, images, annotations = [], [], {}
    for k in range(spec.n_images):
        img, boxes = render_scene(spec, k)
        ids.append(image_id(k))
        images.append(img)
        annotations[ids[-1]] = boxes
    return ids, images, annotations


def generate_dataset(spec: SceneSpec) -> Dataset:
    """In-memory dataset with images as floats ``u8 / 255`` (the exact on-disk values)."""
    ids, images, annotations = generate(spec)
    return Dataset(ids, {i: to_float(im) for i, im in zip(ids, images)}, annotations, spec.n_classes)


def sha256_file(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(spec: SceneSpec, out: Union[str, Path]) -> Path:
    """Write images, annotations, the scene spec and a manifest; returns the manifest path."""
    out = Path(out)
    (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    ids, images, annotations = generate(spec)
    files = []
    for i, img in zip(ids, images):
        rel = f"{IMAGE_DIR}/{i}.ppm"
        write_ppm(out / rel, img)
        files.append(rel)
    write_detections(out / ANNOTATIONS, {i: [Detection(b, b.label, 1.0) for b in annotations[i]] for i in ids})
    (out / SCENE).write_text(dump_kv(spec), encoding="utf-8")
    files += [ANNOTATIONS, SCENE]
    manifest = out / MANIFEST
    manifest.write_text("".join(f"{rel} {sha256_file(out / rel)}\n" for rel in files), encoding="utf-8")
    return manifest


def load_dataset(root: Union[str, Path], verify: bool = False) -> Dataset:
    root = Path(root)
    spec = load_kv(root / SCENE, SceneSpec)
    if verify:
        verify_manifest(root)
    records = read_detections(root / ANNOTATIONS) if (root / ANNOTATIONS).exists() else {}
    paths = sorted((root / IMAGE_DIR).glob("*.ppm"))
    ids = [p.stem for p in paths]
    images = {p.stem: to_float(read_ppm(p)) for p in paths}
    annotations = {i: [d.box for d in records.get(i, [])] for i in ids}
    unknown = set(records) - set(ids)
    if unknown:
        raise ValueError(f"annotations reference missing images: {sorted(unknown)[:3]}")
    return Dataset(ids, images, annotations, spec.n_classes)


def verify_manifest(root: Union[str, Path]) -> None:
    root = Path(root)
    for line in (root / MANIFEST).read_text(encoding="utf-8").splitlines():
        rel, digest = line.rsplit(" ", 1)
        if sha256_file(root / rel) != digest:
            raise ValueError(f"{rel}: digest mismatch")


def descriptor_separation(dataset: Dataset, model: LocalModel, max_boxes: Optional[int] = None) -> tuple[float, float]:
    """Mean between-class and within-class distance of per-box mean descriptors."""
    feats, labels = [], []
    for image, boxes in dataset.items():
        desc = window_descriptors(image, model)
        cfg = model.rf_config(image.shape[0], image.shape[1])
        for b in boxes:
            fb = map_box_to_feature_space(b, cfg)
            if not fb.empty:
                feats.append(desc[fb.slices()].mean(axis=(0, 1)))
                labels.append(b.label)
        if max_boxes is not None and len(feats) >= max_boxes:
            break
    F, L = np.array(feats), np.array(labels)
    d = np.linalg.norm(F[:, None, :] - F[None, :, :], axis=-1)
    same = L[:, None] == L[None, :]
    off = ~np.eye(len(L), dtype=bool)
    return float(d[~same].mean()), float(d[same & off].mean())
