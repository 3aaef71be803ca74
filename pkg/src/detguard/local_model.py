"""Small-receptive-field local classifier with a clipping aggregation head.

Each feature cell looks at one ``r x r`` pixel window. A fixed, untrained
descriptor (channel means, channel standard deviations and a seeded random
projection of the mean-centred window) feeds an ``(N+1)``-way linear head.
Class ``N`` is background.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import FeatureBox, PixelBox, ReceptiveFieldConfig, map_box_to_feature_space

log = logging.getLogger(__name__)

CHANNELS = 3
PROJECTION_SEED = 20211
MODEL_MAGIC = "CGMODEL"
MODEL_VERSION = "v1"


def _projection(r: int, n_proj: int) -> np.ndarray:
    rng = np.random.default_rng(PROJECTION_SEED)
    proj = rng.standard_normal((n_proj, CHANNELS, r, r))
    return proj / np.sqrt(CHANNELS * r * r)


@dataclass(eq=False)
class LocalModel:
    r: int
    s: int
    n_classes: int
    weights: np.ndarray  # (F, N+1)
    bias: np.ndarray  # (N+1,)
    _proj: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        k = self.n_classes + 1
        if self.weights.ndim != 2 or self.weights.shape[1] != k or self.bias.shape != (k,):
            raise ValueError(f"head shapes {self.weights.shape}/{self.bias.shape} inconsistent with N={self.n_classes}")
        if self.n_features < 2 * CHANNELS:
            raise ValueError(f"need at least {2 * CHANNELS} features, got {self.n_features}")

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    @property
    def n_proj(self) -> int:
        return self.n_features - 2 * CHANNELS

    @property
    def projection(self) -> np.ndarray:
        if self._proj is None:
            self._proj = _projection(self.r, self.n_proj)
        return self._proj

    def rf_config(self, W: int, H: int) -> ReceptiveFieldConfig:
        return ReceptiveFieldConfig(self.r, self.s, W, H)

    def equals(self, other: "LocalModel") -> bool:
        return (self.r, self.s, self.n_classes) == (other.r, other.s, other.n_classes) \
            and np.array_equal(self.weights, other.weights) and np.array_equal(self.bias, other.bias)


def init_model(r: int, s: int, n_classes: int, n_proj: int = 6, seed: int = 0) -> LocalModel:
    rng = np.random.default_rng(seed)
    n_feat = 2 * CHANNELS + n_proj
    weights = rng.normal(0.0, 0.01, size=(n_feat, n_classes + 1))
    bias = np.full(n_classes + 1, 0.1)
    return LocalModel(r, s, n_classes, weights, bias)


def _check_image(image: np.ndarray, model: LocalModel) -> None:
    if image.ndim != 3 or image.shape[2] != CHANNELS:
        raise ValueError(f"expected a (W, H, {CHANNELS}) image, got shape {image.shape}")
    if image.shape[0] < model.r or image.shape[1] < model.r:
        raise ValueError(f"image {image.shape[:2]} smaller than receptive field {model.r}")


def _descriptors(pixels: np.ndarray, model: LocalModel) -> np.ndarray:
    """Descriptors of every stride-aligned ``r x r`` window of ``pixels`` ``(..., w, h, C)``."""
    r, s = model.r, model.s
    nd = pixels.ndim
    # (..., a, b, C, r, r)
    win = sliding_window_view(pixels, (r, r), axis=(nd - 3, nd - 2))[..., ::s, ::s, :, :, :]
    flat = win.reshape(win.shape[:-2] + (r * r,))
    mean = flat.mean(axis=-1)
    centred = flat - mean[..., None]
    std = np.sqrt((centred * centred).mean(axis=-1))
    proj = centred.reshape(centred.shape[:-2] + (-1,)) @ model.projection.reshape(model.n_proj, -1).T
    return np.concatenate([mean, std, proj], axis=-1)


def region_pixels(region: FeatureBox, model: LocalModel) -> tuple[slice, slice]:
    """Pixel slices covering the receptive fields of every cell in ``region``."""
    i0, j0, i1, j1 = region
    r, s = model.r, model.s
    return slice(i0 * s, (i1 - 1) * s + r), slice(j0 * s, (j1 - 1) * s + r)


def window_descriptors(image: np.ndarray, model: LocalModel, region: Optional[FeatureBox] = None) -> np.ndarray:
    """Descriptor of every cell in ``region`` (whole map by default), shape ``(a, b, F)``."""
    _check_image(image, model)
    if region is None:
        cfg = model.rf_config(image.shape[0], image.shape[1])
        region = FeatureBox(0, 0, cfg.X, cfg.Y)
    if region.empty:
        raise ValueError(f"empty region {region}")
    return _descriptors(image[region_pixels(region, model)], model)


def extract_local_logits(image: np.ndarray, model: LocalModel, region: Optional[FeatureBox] = None) -> np.ndarray:
    """Local logits map of shape ``(X, Y, N+1)`` (or of ``region`` only)."""
    feats = window_descriptors(image, model, region)
    return feats @ model.weights + model.bias


def crop_logits(crops: np.ndarray, model: LocalModel) -> np.ndarray:
    """Logits of a stack of pixel crops ``(B, w, h, C)`` taken with :func:`region_pixels`."""
    return _descriptors(crops, model) @ model.weights + model.bias


def rch(window: np.ndarray) -> tuple[int, np.ndarray]:
    """Clip logits into ``[0, inf)``, sum over the window, argmax (ties to the lowest class)."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 3 or window.shape[0] == 0 or window.shape[1] == 0:
        raise ValueError(f"empty or malformed window of shape {window.shape}")
    v = np.maximum(window, 0.0).sum(axis=(0, 1))
    return int(np.argmax(v)), v


@dataclass(frozen=True)
class LogitsBounds:
    lower: np.ndarray
    upper: np.ndarray  # +inf: clipping to [0, inf) admits no finite upper bound


def rch_pa(window: np.ndarray, corrupted: Union[np.ndarray, Iterable[tuple[int, int]]]) -> LogitsBounds:
    """Worst-case logits of :func:`rch` when ``corrupted`` cells are attacker-controlled.

    ``corrupted`` is a boolean mask over the window's cells or an iterable of
    window-relative ``(i, j)`` cells.
    """
    window = np.asarray(window, dtype=np.float64)
    if isinstance(corrupted, np.ndarray) and corrupted.dtype == bool:
        mask = corrupted
    else:
        mask = np.zeros(window.shape[:2], dtype=bool)
        for i, j in corrupted:
            mask[i, j] = True
    clipped = np.maximum(window, 0.0)
    clipped[mask] = 0.0
    lower = clipped.sum(axis=(0, 1))
    return LogitsBounds(lower, np.full_like(lower, np.inf))


# --- training -------------------------------------------------------------

class _Samples:
    """Concatenated cell descriptors of every training sample, grouped contiguously."""

    def __init__(self, feats: list[np.ndarray], labels: list[int]):
        self.Z = np.concatenate(feats, axis=0)
        counts = np.array([f.shape[0] for f in feats])
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.counts = counts.astype(np.float64)
        self.seg = np.repeat(np.arange(len(feats)), counts)
        self.labels = np.asarray(labels)

    def loss_and_grad(self, W: np.ndarray, b: np.ndarray, need_grad: bool = True):
        z = self.Z @ W + b
        a = np.maximum(z, 0.0)
        g = np.add.reduceat(a, self.starts, axis=0) / self.counts[:, None]
        g_shift = g - g.max(axis=1, keepdims=True)
        logp = g_shift - np.log(np.exp(g_shift).sum(axis=1, keepdims=True))
        n = len(self.labels)
        loss = -logp[np.arange(n), self.labels].mean()
        if not need_grad:
            return loss, None, None
        dg = np.exp(logp)
        dg[np.arange(n), self.labels] -= 1.0
        dg /= n
        dz = (dg / self.counts[:, None])[self.seg] * (z > 0)
        return loss, self.Z.T @ dz, dz.sum(axis=0)


def training_samples(dataset: Sequence[tuple[np.ndarray, Sequence[PixelBox]]], model: LocalModel):
    """Per-box cell descriptors plus one background sample per image.

    Returns ``(features, labels, skipped)`` where ``skipped`` counts boxes
    whose feature box was empty after mapping.
    """
    feats, labels, skipped = [], [], 0
    n = model.n_classes
    for image, boxes in dataset:
        desc = window_descriptors(image, model)
        cfg = model.rf_config(image.shape[0], image.shape[1])
        covered = np.zeros(desc.shape[:2], dtype=bool)
        for box in boxes:
            if box.label is None or not 0 <= box.label < n:
                raise ValueError(f"box label {box.label} outside 0..{n - 1}")
            fb = map_box_to_feature_space(box, cfg)
            if fb.empty:
                skipped += 1
                continue
            covered[fb.slices()] = True
            feats.append(desc[fb.slices()].reshape(-1, desc.shape[-1]))
            labels.append(box.label)
        if not covered.all():
            feats.append(desc[~covered])
            labels.append(n)
    return feats, labels, skipped


def train_local_model(dataset: Sequence[tuple[np.ndarray, Sequence[PixelBox]]], n_classes: int, r: int, s: int,
                      learning_rate: float = 1.0, epochs: int = 300, seed: int = 0, n_proj: int = 6,
                      history: Optional[list] = None) -> LocalModel:
    """Fit the linear head by full-batch gradient descent with backtracking.

    Every accepted step lowers the training loss, so the loss trace is
    non-increasing. ``history`` (if given) receives the loss before each
    epoch followed by the final loss.
    """
    if not dataset:
        raise ValueError("empty training set")
    model = init_model(r, s, n_classes, n_proj=n_proj, seed=seed)
    if epochs <= 0:
        return model
    feats, labels, skipped = training_samples(dataset, model)
    if skipped:
        log.warning("skipped %d boxes with empty feature boxes", skipped)
    if not feats:
        raise ValueError("no usable training samples")
    samples = _Samples(feats, labels)
    W, b = model.weights.copy(), model.bias.copy()
    loss, gW, gb = samples.loss_and_grad(W, b)
    lr = learning_rate
    for _ in range(epochs):
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss {loss}")
        if history is not None:
            history.append(float(loss))
        for _ in range(40):
            W_new, b_new = W - lr * gW, b - lr * gb
            new_loss, _, _ = samples.loss_and_grad(W_new, b_new, need_grad=False)
            if np.isfinite(new_loss) and new_loss <= loss:
                break
            lr *= 0.5
        else:
            break
        W, b = W_new, b_new
        loss, gW, gb = samples.loss_and_grad(W, b)
        lr *= 1.25
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss {loss}")
    if history is not None:
        history.append(float(loss))
    return LocalModel(r, s, n_classes, W, b)


def classify_box(logits: np.ndarray, box: PixelBox, cfg: ReceptiveFieldConfig) -> Optional[int]:
    """Label of ``box`` by :func:`rch` over its feature box; ``None`` when the box maps to no cell."""
    fb = map_box_to_feature_space(box, cfg)
    if fb.empty:
        return None
    return rch(logits[fb.slices()])[0]


# --- persistence ----------------------------------------------------------

def save_model(model: LocalModel, path: Union[str, Path]) -> None:
    lines = [f"{MODEL_MAGIC} {MODEL_VERSION} {model.r} {model.s} {model.n_classes} {model.n_features}"]
    lines += [repr(float(v)) for v in model.weights.ravel(order="C")]
    lines += [repr(float(v)) for v in model.bias]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path: Union[str, Path]) -> LocalModel:
    text = Path(path).read_text(encoding="utf-8").split("\n")
    header = text[0].split()
    if len(header) != 6 or header[0] != MODEL_MAGIC or header[1] != MODEL_VERSION:
        raise ValueError(f"{path}: not a {MODEL_MAGIC} {MODEL_VERSION} model file")
    r, s, n, f = (int(v) for v in header[2:])
    values = [float(v) for v in text[1:] if v.strip()]
    k = n + 1
    if len(values) != f * k + k:
        raise ValueError(f"{path}: expected {f * k + k} values, found {len(values)}")
    weights = np.array(values[:f * k]).reshape(f, k)
    bias = np.array(values[f * k:])
    return LocalModel(r, s, n, weights, bias)
