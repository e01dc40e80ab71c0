"""Weak (geometric) and strong (photometric) views plus CutMix.

One geometry is sampled per sample and shared by its weak and strong views;
``strong_augment`` only touches channel values, so pixel-wise losses between
the two views are well defined.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import bilinear_resize_array, nearest_downsample


@dataclass(frozen=True)
class GeometryRecord:
    scale: float
    flip: bool
    crop_row: int
    crop_col: int
    crop_h: int
    crop_w: int
    scaled_h: int
    scaled_w: int


@dataclass(frozen=True)
class CutMixBox:
    source: int
    row: int
    col: int
    height: int
    width: int


@dataclass(frozen=True)
class StrongAugParams:
    p_jitter: float = 0.8
    gain_range: tuple[float, float] = (0.6, 1.4)
    bias_range: tuple[float, float] = (-0.2, 0.2)
    p_gray: float = 0.2
    p_blur: float = 0.5
    sigma_range: tuple[float, float] = (0.1, 1.0)


def apply_geometry(image: np.ndarray, label: np.ndarray | None, geom: GeometryRecord):
    """Scale (bilinear image, nearest label), flip, then crop."""
    img = image
    lab = label
    if (geom.scaled_h, geom.scaled_w) != image.shape[-2:]:
        img = bilinear_resize_array(image, geom.scaled_h, geom.scaled_w)
        if lab is not None:
            lab = nearest_downsample(lab, geom.scaled_h, geom.scaled_w)
    if geom.flip:
        img = img[..., ::-1]
        if lab is not None:
            lab = lab[..., ::-1]
    rs = slice(geom.crop_row, geom.crop_row + geom.crop_h)
    cs = slice(geom.crop_col, geom.crop_col + geom.crop_w)
    img = np.ascontiguousarray(img[..., rs, cs])
    if lab is not None:
        lab = np.ascontiguousarray(lab[..., rs, cs])
    return img, lab


def sample_geometry(H: int, W: int, rng: np.random.Generator, crop: tuple[int, int] | None = None,
                    scale_range: tuple[float, float] = (0.5, 2.0), p_flip: float = 0.5) -> GeometryRecord:
    crop_h, crop_w = crop if crop is not None else (H, W)
    # The crop must fit in the scaled image, which raises the effective lower scale bound.
    lo = max(scale_range[0], crop_h / H, crop_w / W)
    hi = max(scale_range[1], lo)
    u = rng.random(4)
    s = lo + (hi - lo) * u[0]
    sh = max(crop_h, int(round(H * s)))
    sw = max(crop_w, int(round(W * s)))
    flip = bool(u[1] < p_flip)
    row = int(math.floor(u[2] * (sh - crop_h + 1)))
    col = int(math.floor(u[3] * (sw - crop_w + 1)))
    return GeometryRecord(float(s), flip, min(row, sh - crop_h), min(col, sw - crop_w), crop_h, crop_w, sh, sw)


def weak_augment(image: np.ndarray, label: np.ndarray | None, rng: np.random.Generator, crop=None,
                 scale_range=(0.5, 2.0)):
    geom = sample_geometry(image.shape[-2], image.shape[-1], rng, crop, scale_range)
    view, label_view = apply_geometry(image, label, geom)
    return view, label_view, geom


def to_grayscale(image: np.ndarray) -> np.ndarray:
    if image.shape[0] == 3:
        lum = np.tensordot(np.array([0.299, 0.587, 0.114]), image, axes=1)
    else:
        lum = image.mean(axis=0)
    return np.broadcast_to(lum, image.shape).copy()


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur with reflect padding; preserves shape."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = image
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        p = np.pad(out, pad, mode="reflect" if out.shape[axis] > r else "edge")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, w in enumerate(k):
            acc += w * np.take(p, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def strong_augment(view: np.ndarray, rng: np.random.Generator, params: StrongAugParams = StrongAugParams()) -> np.ndarray:
    """Photometric perturbation only; every call consumes the same number of draws."""
    c = view.shape[0]
    u = rng.random(3)
    gains = rng.uniform(*params.gain_range, size=c)
    biases = rng.uniform(*params.bias_range, size=c)
    sigma = rng.uniform(*params.sigma_range)
    out = view.astype(np.float64, copy=True)
    if u[0] < params.p_jitter:
        out = out * gains[:, None, None] + biases[:, None, None]
    if u[1] < params.p_gray:
        out = to_grayscale(out)
    if u[2] < params.p_blur:
        out = gaussian_blur(out, sigma)
    return np.clip(out, 0.0, 1.0)


def sample_box(H: int, W: int, rng: np.random.Generator, area_range=(0.25, 0.5)) -> tuple[int, int, int, int]:
    u = rng.random(4)
    area = (area_range[0] + (area_range[1] - area_range[0]) * u[0]) * H * W
    ratio = math.exp(math.log(0.5) + u[1] * math.log(4.0))
    h = int(min(max(round(math.sqrt(area * ratio)), 1), H))
    w_lo = max(1, math.ceil(area_range[0] * H * W / h))
    w_hi = min(W, math.floor(area_range[1] * H * W / h))
    w = int(min(max(round(area / h), w_lo), w_hi))
    row = int(math.floor(u[2] * (H - h + 1)))
    col = int(math.floor(u[3] * (W - w + 1)))
    return min(row, H - h), min(col, W - w), h, w


def paste(arrays: list[np.ndarray], boxes: list[CutMixBox]) -> list[np.ndarray]:
    """Apply the boxes to each batch-first array, reading donors from the unmixed input."""
    out = [a.copy() for a in arrays]
    for i, b in enumerate(boxes):
        if b.height == 0 or b.width == 0:
            continue
        rs = slice(b.row, b.row + b.height)
        cs = slice(b.col, b.col + b.width)
        for src, dst in zip(arrays, out):
            dst[i, ..., rs, cs] = src[b.source, ..., rs, cs]
    return out


def cutmix(views: np.ndarray, pseudo: np.ndarray, masks: np.ndarray, rng: np.random.Generator,
           extra: list[np.ndarray] = (), area_range=(0.25, 0.5)):
    """Paste one box per target from another sample of the batch.

    Views, pseudo labels, masks and any ``extra`` batch-first arrays (e.g.
    weak-view logits) are mixed with the same boxes. Returns
    ``(views, pseudo, masks, extra, boxes)``.
    """
    n = views.shape[0]
    arrays = [views, pseudo, masks, *extra]
    if n < 2:
        return (*[a.copy() for a in arrays[:3]], [a.copy() for a in arrays[3:]], [])
    H, W = views.shape[-2:]
    boxes = []
    for i in range(n):
        donor = int(rng.integers(0, n - 1))
        donor += donor >= i
        r, c, h, w = sample_box(H, W, rng, area_range)
        boxes.append(CutMixBox(donor, r, c, h, w))
    mixed = paste(arrays, boxes)
    return mixed[0], mixed[1], mixed[2], mixed[3:], boxes


__all__ = [
    "CutMixBox",
    "GeometryRecord",
    "StrongAugParams",
    "apply_geometry",
    "cutmix",
    "gaussian_blur",
    "paste",
    "sample_geometry",
    "strong_augment",
    "to_grayscale",
    "weak_augment",
]
