"""Image preprocessing: bilinear resize, per-channel normalization and the
training-time augmentation pipeline.

Images are ``(C, H, W)`` float arrays. Every random choice is drawn from the
``numpy.random.Generator`` passed in, so a fixed stream gives byte-identical
output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

# ITU-R 601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114])

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class AugmentParams:
    """Probabilities and magnitudes of the training augmentations.

    Every transform fires independently with its own probability.
    """

    p_flip: float = 0.5
    p_grayscale: float = 0.1
    p_jitter: float = 0.5
    p_rotate: float = 0.5
    p_translate: float = 0.5
    p_blur: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    max_rotation_deg: float = 15.0
    max_translate_frac: float = 0.1
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    @classmethod
    def disabled(cls) -> "AugmentParams":
        return cls(p_flip=0.0, p_grayscale=0.0, p_jitter=0.0, p_rotate=0.0,
                   p_translate=0.0, p_blur=0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blur_sigma"] = list(self.blur_sigma)
        return d


@dataclass(frozen=True)
class NormalizeParams:
    side: int = 224
    mean: tuple[float, ...] = field(default=(0.0, 0.0, 0.0))
    std: tuple[float, ...] = field(default=(1.0, 1.0, 1.0))

    def to_dict(self) -> dict:
        return {"side": self.side, "mean": list(self.mean), "std": list(self.std)}


def _pixels(img) -> np.ndarray:
    arr = getattr(img, "pixels", img)
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {arr.shape}")
    return arr


def _grayscale(x: np.ndarray) -> np.ndarray:
    if x.shape[0] == 3:
        gray = np.tensordot(_LUMA, x, axes=1)
    else:
        gray = x.mean(axis=0)
    return np.broadcast_to(gray, x.shape).astype(x.dtype)


def _jitter(x: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(1 - params.brightness, 1 + params.brightness)
    c = rng.uniform(1 - params.contrast, 1 + params.contrast)
    s = rng.uniform(1 - params.saturation, 1 + params.saturation)
    out = x * b
    out = (out - out.mean()) * c + out.mean()
    gray = _grayscale(out)
    return (gray + (out - gray) * s).astype(x.dtype)


def augment(img, rng: np.random.Generator, params: AugmentParams | None = None) -> np.ndarray:
    """Randomly flip, grayscale, color-jitter, rotate, translate and blur ``img``.

    The output always has the input's shape and dtype. With every probability
    at zero the input is returned unchanged (as a copy).
    """
    params = params or AugmentParams()
    x = np.array(_pixels(img), copy=True)
    h, w = x.shape[1:]

    if rng.random() < params.p_flip:
        x = np.ascontiguousarray(x[:, :, ::-1])
    if rng.random() < params.p_grayscale:
        x = _grayscale(x).copy()
    if rng.random() < params.p_jitter:
        x = _jitter(x, params, rng)
    if rng.random() < params.p_rotate:
        angle = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)
        x = ndimage.rotate(x, angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
    if rng.random() < params.p_translate:
        dy = rng.uniform(-params.max_translate_frac, params.max_translate_frac) * h
        dx = rng.uniform(-params.max_translate_frac, params.max_translate_frac) * w
        x = ndimage.shift(x, (0, dy, dx), order=1, mode="nearest")
    if rng.random() < params.p_blur:
        sigma = rng.uniform(*params.blur_sigma)
        x = ndimage.gaussian_filter(x, sigma=(0, sigma, sigma), mode="nearest")
    return x.astype(_pixels(img).dtype, copy=False)


def resize(img, side: int) -> np.ndarray:
    """Bilinear resize to ``side x side`` (half-pixel centers, no antialias).

    Inputs already at the target side are returned untouched.
    """
    x = _pixels(img)
    if x.shape[1] == 0 or x.shape[2] == 0 or x.shape[0] == 0:
        raise ValueError(f"cannot resize a zero-sized image of shape {x.shape}")
    if x.shape[1] == side and x.shape[2] == side:
        return x
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64))[None]
    out = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)
    return out[0].numpy().astype(x.dtype if x.dtype.kind == "f" else np.float32)


def normalize(img, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    x = _pixels(img)
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    if np.any(std <= 0):
        raise ValueError("normalization std must be positive")
    dtype = x.dtype if x.dtype.kind == "f" else np.float32
    return ((x - mean) / std).astype(dtype)


def resize_and_normalize(img, params: NormalizeParams | None = None) -> np.ndarray:
    params = params or NormalizeParams()
    return normalize(resize(img, params.side), params.mean, params.std)


def preprocess_batch(images: np.ndarray, params: NormalizeParams, rng: np.random.Generator | None = None,
                     augment_params: AugmentParams | None = None) -> np.ndarray:
    """Resize (+ augment when ``rng`` is given) + normalize a ``(N, C, H, W)`` stack."""
    out = []
    for img in images:
        x = resize(img, params.side)
        if rng is not None:
            x = augment(x, rng, augment_params)
        out.append(normalize(x, params.mean, params.std))
    if not out:
        return np.zeros((0, *np.shape(images)[1:2], params.side, params.side), dtype=np.float32)
    return np.stack(out)
