"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_images(X, dtype=np.float32, expected_shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Return ``X`` as a finite ``(N, C, H, W)`` array of ``dtype``."""
    if hasattr(X, "detach"):
        X = X.detach().cpu().numpy()
    X = np.asarray(X)
    if X.dtype.kind not in "fiu":
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, C, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("found an empty image batch")
    if expected_shape is not None and tuple(X.shape[1:]) != tuple(expected_shape):
        raise ValueError(f"images must have shape (N, {', '.join(map(str, expected_shape))}), got {X.shape}")
    if dtype is None:
        dtype = X.dtype if X.dtype.kind == "f" else np.float32
    X = X.astype(dtype, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinity")
    return X


def check_labels(y, n_samples: int, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"expected {n_samples} labels, got shape {y.shape}")
    if y.dtype.kind not in "iu":
        if y.dtype.kind == "f" and np.all(np.mod(y, 1) == 0):
            y = y.astype(np.int64)
        else:
            raise ValueError(f"labels must be integer class indices, got dtype {y.dtype}")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("labels must be non-negative class indices")
    if n_classes is not None and y.max() >= n_classes:
        raise ValueError(f"label {int(y.max())} is out of range for {n_classes} classes")
    return y


def check_sample_domain(sample_domain, n_samples: int) -> np.ndarray:
    if sample_domain is None:
        return np.zeros(n_samples, dtype=object)
    sd = np.asarray(sample_domain, dtype=object)
    if sd.ndim != 1 or len(sd) != n_samples:
        raise ValueError(f"sample_domain must have one entry per sample ({n_samples}), got shape {sd.shape}")
    return sd
