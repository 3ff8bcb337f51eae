"""Input validation helpers shared by the estimators and pipeline functions."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def check_heatmap(h) -> np.ndarray:
    """Return ``h`` as a 2D uint8 array of {0, 1}, raising on anything else."""
    arr = np.asarray(h)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"heatmap must be a non-empty 2D array, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("heatmap values must be 0 (copper) or 1 (impurity)")
    return arr.astype(np.uint8, copy=False)


def check_image(img, size: tuple[int, int] | None = None) -> np.ndarray:
    """Validate an ``(H, W, 3)`` uint8 RGB image."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"image must be uint8, got {arr.dtype}")
    if size is not None and arr.shape[:2] != tuple(size):
        raise ValueError(f"image is {arr.shape[:2]}, model expects {tuple(size)}")
    return arr


def check_images(images, size: tuple[int, int] | None = None) -> np.ndarray:
    """Validate a batch of RGB images, returning an ``(N, H, W, 3)`` array."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = images[None]
    if len(images) == 0:
        raise ValueError("no images given")
    arrs = [check_image(im) for im in images]
    shape = arrs[0].shape
    for i, a in enumerate(arrs):
        if a.shape != shape:
            raise ValueError(f"image {i} has shape {a.shape}, expected {shape}")
    out = np.stack(arrs)
    if size is not None and out.shape[1:3] != tuple(size):
        raise ValueError(f"images are {out.shape[1:3]}, model expects {tuple(size)}")
    return out


def check_masks(masks, n_images: int | None = None) -> np.ndarray:
    if isinstance(masks, np.ndarray) and masks.ndim == 2:
        masks = masks[None]
    out = np.stack([check_heatmap(m) for m in masks])
    if n_images is not None and len(out) != n_images:
        raise ValueError(f"{len(out)} masks for {n_images} images")
    return out


def check_unit_interval(x: float, name: str, *, open_low: bool = False) -> float:
    x = float(x)
    if not np.isfinite(x) or x > 1.0 or x < 0.0 or (open_low and x == 0.0):
        bounds = "(0, 1]" if open_low else "[0, 1]"
        raise ValueError(f"{name} must lie in {bounds}, got {x}")
    return x


def check_divisible(shape: Sequence[int], factor: int) -> None:
    """Raise with the padding needed when ``shape`` is not a multiple of ``factor``."""
    h, w = shape
    if h % factor or w % factor:
        pad_h = (-h) % factor
        pad_w = (-w) % factor
        raise ValueError(
            f"image size {h}x{w} is not divisible by {factor}; "
            f"pad by {pad_h} rows and {pad_w} columns"
        )
