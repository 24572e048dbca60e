"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_images(X, image_size: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected images of shape (n, H, W), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if image_size is not None and X.shape[1] != image_size:
        raise ValueError(f"expected {image_size}px images, got {X.shape[1]}px")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or inf")
    return X


def check_label_maps(y, n_images: int, grid: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_images, grid, grid):
        raise ValueError(f"expected label maps of shape {(n_images, grid, grid)}, got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("labels must be non-negative")
    return y.astype(np.int64)
