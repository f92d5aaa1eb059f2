"""Pre-processing and sliding-window inference.

Images are resized so the shorter side equals ``short_side``, edge-padded to
a multiple of the patch size, and covered by square windows. Each window's
patch logits are upsampled to pixel resolution before being accumulated, the
canvas is divided by the per-pixel hit count, the padding is cropped, and the
logits are resized back to the original resolution before the argmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .attention import AttentionMode
from .classifier import ClassEmbeddingSet, DenseLogits, classify_dense
from .errors import ConfigError
from .tensor import DTYPE, as_tensor, bilinear_resize
from .vit import VitModel, forward_features


@dataclass(frozen=True)
class SlideConfig:
    short_side: int = 336
    window: int = 224
    stride: int = 112

    def validate(self, patch_size: int) -> None:
        if self.stride < 1 or self.window < 1 or self.short_side < 1:
            raise ConfigError(f"slide sizes must be positive: {self}")
        if self.stride > self.window:
            raise ConfigError(f"stride {self.stride} exceeds window {self.window}")
        if self.window % patch_size:
            raise ConfigError(f"window {self.window} not divisible by patch size {patch_size}")
        if self.short_side < self.window:
            raise ConfigError(f"short side {self.short_side} smaller than window {self.window}")


@dataclass(frozen=True)
class Padding:
    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0

    def crop(self, x: np.ndarray) -> np.ndarray:
        h, w = x.shape[-2:]
        return x[..., self.top : h - self.bottom, self.left : w - self.right]


def resize_shorter_side(image, s: int) -> np.ndarray:
    """Aspect-preserving bilinear resize so that ``min(H', W') == s``."""
    if s < 1:
        raise ConfigError(f"target short side must be >= 1, got {s}")
    image = as_tensor(image, ndim=3, name="image")
    _, h, w = image.shape
    if h <= w:
        new_h, new_w = s, max(1, int(round(w * s / h)))
    else:
        new_h, new_w = max(1, int(round(h * s / w))), s
    return bilinear_resize(image, new_h, new_w)


def pad_to_multiple(image: np.ndarray, p: int) -> tuple[np.ndarray, Padding]:
    """Edge-replicate symmetrically so both spatial extents divide by ``p``."""
    _, h, w = image.shape
    dh, dw = -h % p, -w % p
    pad = Padding(dh // 2, dh - dh // 2, dw // 2, dw - dw // 2)
    if dh == 0 and dw == 0:
        return image, pad
    padded = np.pad(image, ((0, 0), (pad.top, pad.bottom), (pad.left, pad.right)), mode="edge")
    return padded, pad


def preprocess(image, short_side: int, patch_size: int) -> tuple[np.ndarray, Padding]:
    return pad_to_multiple(resize_shorter_side(image, short_side), patch_size)


def _axis_starts(n: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def window_grid(h: int, w: int, window: int, stride: int) -> list[tuple[int, int]]:
    """Top-left corners of the windows covering an ``h x w`` image.

    The last start in each axis is clamped so the windows reach the border.
    """
    if window > h or window > w:
        raise ConfigError(f"window {window} larger than image {h}x{w}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    return [(t, l) for t in _axis_starts(h, window, stride) for l in _axis_starts(w, window, stride)]


def dense_logits(model: VitModel, image, classes: ClassEmbeddingSet, mode: AttentionMode) -> DenseLogits:
    return classify_dense(forward_features(model, image, mode), classes)


def window_logits(model: VitModel, crop, classes: ClassEmbeddingSet, mode: AttentionMode) -> np.ndarray:
    """``C x h x w`` pixel logits for one window: patch logits upsampled bilinearly."""
    crop = as_tensor(crop, ndim=3, name="window")
    grid = dense_logits(model, crop, classes, mode).as_grid()
    return bilinear_resize(grid, crop.shape[1], crop.shape[2])


def stitch_windows(
    shape: tuple[int, int, int], windows: Iterable[tuple[int, int, np.ndarray]]
) -> np.ndarray:
    """Average overlapping ``(top, left, logits)`` windows into a ``C x H x W`` canvas."""
    c, h, w = shape
    canvas = np.zeros((c, h, w), dtype=np.float64)
    counts = np.zeros((h, w), dtype=np.int64)
    for top, left, logits in windows:
        _, wh, ww = logits.shape
        canvas[:, top : top + wh, left : left + ww] += logits
        counts[top : top + wh, left : left + ww] += 1
    if np.any(counts == 0):
        raise ConfigError("windows do not cover the whole canvas")
    return (canvas / counts).astype(DTYPE)


def slide_logits(
    model: VitModel,
    image,
    classes: ClassEmbeddingSet,
    mode: AttentionMode,
    cfg: SlideConfig = SlideConfig(),
) -> np.ndarray:
    """Stitched ``C x H x W`` logits at the original image resolution."""
    image = as_tensor(image, ndim=3, name="image")
    p = model.config.patch_size
    cfg.validate(p)
    padded, pad = preprocess(image, cfg.short_side, p)
    _, ph, pw = padded.shape
    win = cfg.window

    def run(corner):
        t, l = corner
        return t, l, window_logits(model, padded[:, t : t + win, l : l + win], classes, mode)

    canvas = stitch_windows((len(classes), ph, pw), map(run, window_grid(ph, pw, win, cfg.stride)))
    canvas = pad.crop(canvas)
    return bilinear_resize(canvas, image.shape[1], image.shape[2])


def direct_logits(
    model: VitModel, image, classes: ClassEmbeddingSet, mode: AttentionMode, short_side: int = 336
) -> np.ndarray:
    """Whole-image (no sliding) counterpart of :func:`slide_logits`."""
    image = as_tensor(image, ndim=3, name="image")
    padded, pad = preprocess(image, short_side, model.config.patch_size)
    logits = pad.crop(window_logits(model, padded, classes, mode))
    return bilinear_resize(logits, image.shape[1], image.shape[2])


def slide_segment(
    model: VitModel,
    image,
    classes: ClassEmbeddingSet,
    mode: AttentionMode,
    cfg: SlideConfig = SlideConfig(),
) -> np.ndarray:
    """Per-pixel class indices at the original resolution (ties -> lowest index)."""
    return np.argmax(slide_logits(model, image, classes, mode, cfg), axis=0)
