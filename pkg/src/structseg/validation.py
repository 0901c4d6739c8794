"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numpy as np


def check_stack(x, name: str = "input", channels: int | None = None, dtype=np.float32) -> np.ndarray:
    """A finite (C, H, W) float array, optionally with a fixed channel count."""
    arr = np.asarray(x)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (C, H, W), got shape {arr.shape}")
    if 0 in arr.shape:
        raise ValueError(f"{name} is empty (shape {arr.shape})")
    if channels is not None and arr.shape[0] != channels:
        raise ValueError(f"{name} has {arr.shape[0]} channels, expected {channels}")
    if not np.issubdtype(arr.dtype, np.number) and arr.dtype != bool:
        raise TypeError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(dtype, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_unit_range(x, name: str = "input") -> np.ndarray:
    arr = check_stack(x, name)
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1], got [{arr.min()}, {arr.max()}]")
    return arr


def check_labels(labels, num_classes: int | None = None, name: str = "labels") -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D label map, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.issubdtype(arr.dtype, np.floating) or np.any(arr != np.round(arr)):
            raise TypeError(f"{name} must hold integer class indices")
    arr = arr.astype(np.int32)
    if arr.size and arr.min() < 0:
        raise ValueError(f"{name} contains negative class {arr.min()}")
    if num_classes is not None and arr.size and arr.max() >= num_classes:
        raise ValueError(f"{name} contains class {arr.max()} but num_classes is {num_classes}")
    return arr


def check_tags(tags, num_channels: int, name: str = "tags") -> np.ndarray:
    """Foreground tags (length ``num_channels - 1``) or a full channel mask."""
    arr = np.asarray(tags, dtype=np.float64).ravel()
    if len(arr) not in (num_channels - 1, num_channels):
        raise ValueError(f"{name} has length {len(arr)}, expected {num_channels - 1} or {num_channels}")
    if not np.all(np.isin(arr, (0.0, 1.0))):
        raise ValueError(f"{name} must be 0/1 flags")
    return arr.astype(np.float32)


def check_image(image, name: str = "image") -> np.ndarray:
    """uint8 (H, W, 3) color or (H, W) gray image."""
    arr = np.asarray(image)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ValueError(f"{name} must be (H, W) or (H, W, 3), got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise TypeError(f"{name} must be uint8, got {arr.dtype}")
    return arr


def check_same_size(a: np.ndarray, b: np.ndarray, names=("first", "second")) -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"{names[0]} size {a.shape[-2:]} does not match {names[1]} size {b.shape[-2:]}")


def check_positive(value, name: str, integer: bool = False):
    if integer and (not float(value).is_integer()):
        raise ValueError(f"{name} must be an integer, got {value}")
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return int(value) if integer else float(value)
