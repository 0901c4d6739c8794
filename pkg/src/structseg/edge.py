"""Canny edge detection and per-class semantic boundary extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# tan(22.5 deg) and tan(67.5 deg): direction bins are decided on |gy|/|gx|
# so that mirroring an image mirrors the bins exactly.
_TAN_22 = np.tan(np.pi / 8)
_TAN_67 = np.tan(3 * np.pi / 8)

# normalized gradients are rounded so that ties which are exact in real
# arithmetic stay exact after floating-point summation
_GRAD_DECIMALS = 9


@dataclass(frozen=True)
class CannyConfig:
    gaussian_sigma: float = 1.4
    low_threshold: float = 0.1
    high_threshold: float = 0.3

    def __post_init__(self):
        if not self.gaussian_sigma > 0:
            raise ValueError(f"gaussian_sigma must be positive, got {self.gaussian_sigma}")
        if not 0 < self.low_threshold < self.high_threshold < 1:
            raise ValueError(
                f"need 0 < low < high < 1, got low={self.low_threshold} high={self.high_threshold}"
            )


def to_gray(image) -> np.ndarray:
    """Luminance of an (H, W, 3) uint8 image with ITU-R 601 weights, as uint8."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.uint8, copy=False)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {image.shape}")
    luma = image.astype(np.float64) @ np.asarray(LUMA_WEIGHTS)
    return np.clip(np.rint(luma), 0, 255).astype(np.uint8)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _correlate1d(img: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    p = np.pad(img, pad, mode="edge")
    n = img.shape[axis]
    out = np.zeros(img.shape, dtype=np.float64)
    for i, wt in enumerate(k):
        out += wt * np.take(p, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur on the last two axes with replicate borders."""
    k = gaussian_kernel1d(sigma)
    return _correlate1d(_correlate1d(np.asarray(img, dtype=np.float64), k, -2), k, -1)


def sobel(img: np.ndarray):
    """Return (gx, gy); x grows to the right, y grows downwards."""
    p = np.pad(img, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return gx, gy


def direction_bins(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Quantize gradient direction: 0 horizontal, 1 down-right, 2 vertical, 3 down-left."""
    ax, ay = np.abs(gx), np.abs(gy)
    bins = np.where(gx * gy > 0, 1, 3)
    bins = np.where(ay <= _TAN_22 * ax, 0, bins)
    bins = np.where(ay >= _TAN_67 * ax, 2, bins)
    return bins


# (dy, dx) step along the gradient for each bin
_BIN_STEPS = ((0, 1), (1, 1), (1, 0), (1, -1))


def non_max_suppression(mag: np.ndarray, bins: np.ndarray) -> np.ndarray:
    """Keep pixels not smaller than both neighbours along the gradient direction."""
    h, w = mag.shape
    p = np.pad(mag, 1, mode="constant")
    keep = np.zeros(mag.shape, dtype=bool)
    for b, (dy, dx) in enumerate(_BIN_STEPS):
        fwd = p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        bwd = p[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        keep |= (bins == b) & (mag >= fwd) & (mag >= bwd)
    return np.where(keep & (mag > 0), mag, 0.0)


def hysteresis(nms: np.ndarray, low: float, high: float) -> np.ndarray:
    """Weak pixels survive when 8-connected to a strong pixel."""
    weak = nms >= low
    strong = nms >= high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros(nms.shape, dtype=bool)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def canny(image, config: CannyConfig | None = None) -> np.ndarray:
    """Binary Canny edge map of a grayscale (or RGB) uint8 image.

    Returns a float32 array of shape (1, H, W) with values in {0, 1}.
    Thresholds are fractions of the maximum gradient magnitude.
    """
    config = config or CannyConfig()
    gray = to_gray(image)
    if gray.shape[0] < 3 or gray.shape[1] < 3:
        raise ValueError(f"image must be at least 3x3, got {gray.shape[0]}x{gray.shape[1]}")
    blurred = gaussian_blur(gray.astype(np.float64), config.gaussian_sigma)
    gx, gy = sobel(blurred)
    peak = np.hypot(gx, gy).max()
    if peak == 0:
        return np.zeros((1,) + gray.shape, dtype=np.float32)
    gx = np.round(gx / peak, _GRAD_DECIMALS)
    gy = np.round(gy / peak, _GRAD_DECIMALS)
    mag = np.hypot(gx, gy)
    nms = non_max_suppression(mag, direction_bins(gx, gy))
    edges = hysteresis(nms, config.low_threshold, config.high_threshold)
    return edges[None].astype(np.float32)


def label_to_boundary(labels, num_classes: int, thickness: int = 1) -> np.ndarray:
    """Per-class boundary stack of shape (num_classes, H, W).

    A pixel of class ``c`` is marked in channel ``c`` when one of its
    4-neighbours has a different label. Marks are then dilated with a square
    of side ``thickness`` (even values round down to the next odd side).
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    if thickness < 1:
        raise ValueError(f"thickness must be >= 1, got {thickness}")
    bad = np.argwhere((labels < 0) | (labels >= num_classes))
    if len(bad):
        r, c = bad[0]
        raise ValueError(
            f"label {labels[r, c]} at (row={r}, col={c}) out of range for {num_classes} classes"
        )
    p = np.pad(labels, 1, mode="edge")
    center = p[1:-1, 1:-1]
    differs = (
        (p[:-2, 1:-1] != center) | (p[2:, 1:-1] != center)
        | (p[1:-1, :-2] != center) | (p[1:-1, 2:] != center)
    )
    out = np.zeros((num_classes,) + labels.shape, dtype=np.float32)
    radius = (thickness - 1) // 2
    for c in np.unique(labels[differs]):
        mask = differs & (labels == c)
        if radius:
            mask = ndimage.maximum_filter(mask, size=2 * radius + 1, mode="constant")
        out[c] = mask
    return out
