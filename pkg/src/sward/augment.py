"""Stochastic image augmentation and batch mixing.

Images are CHW float32 in [0, 1].  `two_views` draws two independent
augmentations of one image (random square crop by area scale, bilinear
resize to the model input size, flips, global brightness shift, per-channel
gain jitter, then clamp).  `mixup` convexly combines a batch with a
permutation of itself and returns the row-stochastic virtual label matrix
that contrastive training consumes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng

__all__ = ["AugmentPolicy", "MixResult", "resize_bilinear", "two_views", "mixup"]


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale_range: tuple[float, float] = (0.5, 1.0)
    horizontal_flip_p: float = 0.5
    vertical_flip_p: float = 0.5
    brightness_jitter: float = 0.2
    channel_jitter: float = 0.1
    output_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "crop_scale_range",
                           tuple(float(s) for s in self.crop_scale_range))
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        for name in ("horizontal_flip_p", "vertical_flip_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.brightness_jitter < 0 or self.channel_jitter < 0:
            raise ValueError("jitter amplitudes must be non-negative")
        if self.output_size < 1:
            raise ValueError(f"output_size must be positive, got {self.output_size}")


@dataclass
class MixResult:
    """Mixed batch with its mixing bookkeeping.

    `virtual_labels[i, i] = lam[i]` and `virtual_labels[i, perm[i]]` gains
    `1 - lam[i]`, so every row sums to 1 (a fixed point when `perm[i] == i`).
    """

    mixed_batch: np.ndarray
    lambdas: np.ndarray
    permutation: np.ndarray
    virtual_labels: np.ndarray


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a CHW image with half-pixel-centered bilinear sampling.

    When output dims equal input dims the result is the input, exactly.
    """
    if image.ndim != 3:
        raise ValueError(f"expected CHW image, got shape {image.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid output size {out_h}x{out_w}")
    _, h, w = image.shape

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0).astype(image.dtype)

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    tl = image[:, y0[:, None], x0[None, :]]
    tr = image[:, y0[:, None], x1[None, :]]
    bl = image[:, y1[:, None], x0[None, :]]
    br = image[:, y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


def _one_view(image: np.ndarray, policy: AugmentPolicy, rng: Rng) -> np.ndarray:
    _, h, w = image.shape
    lo, hi = policy.crop_scale_range
    if math.sqrt(lo) * min(h, w) < 1.0:
        raise ValueError(f"image {h}x{w} smaller than minimum crop for scale range {policy.crop_scale_range}")

    area_scale = rng.uniform(lo, hi)
    side = min(min(h, w), max(1, round(math.sqrt(area_scale) * min(h, w))))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    view = image[:, top:top + side, left:left + side]
    view = resize_bilinear(view, policy.output_size, policy.output_size)

    if rng.uniform() < policy.horizontal_flip_p:
        view = view[:, :, ::-1]
    if rng.uniform() < policy.vertical_flip_p:
        view = view[:, ::-1, :]

    b = policy.brightness_jitter
    view = view + np.float32(rng.uniform(-b, b))
    c = policy.channel_jitter
    gains = (1.0 + rng.uniform(-c, c, size=(image.shape[0], 1, 1))).astype(np.float32)
    view = view * gains
    return np.clip(view, 0.0, 1.0)


def two_views(image: np.ndarray, policy: AugmentPolicy, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Two independent augmentations of one CHW image."""
    image = np.asarray(image, dtype=np.float32)
    return _one_view(image, policy, rng.child(0)), _one_view(image, policy, rng.child(1))


def mixup(batch: np.ndarray, alpha: float, rng: Rng) -> MixResult:
    """Mix a batch with a random permutation of itself.

    Per-sample weights come from Beta(alpha, alpha); sample i becomes
    ``lam[i] * batch[i] + (1 - lam[i]) * batch[perm[i]]``.
    """
    batch = np.asarray(batch, dtype=np.float32)
    b = batch.shape[0]
    if b < 2:
        raise ValueError(f"mixup needs a batch of at least 2, got {b}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    lam = rng.beta(alpha, size=b)
    perm = rng.permutation(b)
    lam32 = lam.astype(np.float32).reshape((b,) + (1,) * (batch.ndim - 1))
    mixed = lam32 * batch + (1.0 - lam32) * batch[perm]
    labels = np.zeros((b, b), dtype=np.float64)
    idx = np.arange(b)
    labels[idx, idx] = lam
    np.add.at(labels, (idx, perm), 1.0 - lam)
    return MixResult(mixed_batch=mixed, lambdas=lam, permutation=perm, virtual_labels=labels)
