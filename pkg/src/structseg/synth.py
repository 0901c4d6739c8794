"""Seeded synthetic scenes, feature pyramids and degraded class activation maps.

Scenes are flat-colored rectangles, ellipses and triangles on a background,
drawn back to front. Degraded CAMs mimic a classifier that only fires on a
small part of each object and leaks a little activation elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .edge import CannyConfig, canny, gaussian_blur, label_to_boundary

SHAPES = ("rectangle", "ellipse", "triangle")

# class 0 is background
DEFAULT_PALETTE = (
    (0.50, 0.50, 0.50),
    (0.90, 0.15, 0.15),
    (0.15, 0.75, 0.20),
    (0.20, 0.30, 0.90),
    (0.95, 0.85, 0.20),
    (0.80, 0.25, 0.85),
    (0.15, 0.85, 0.85),
    (0.95, 0.55, 0.10),
    (0.10, 0.10, 0.10),
)

PYRAMID_SCALES = (1, 2, 4, 8)
# per-level noise on the class indicator channels; finer levels are less semantic
PYRAMID_NOISE = (0.6, 0.4, 0.2, 0.1)


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    class_id: int
    top: int
    left: int
    height: int
    width: int


@dataclass(frozen=True)
class SceneSpec:
    width: int = 32
    height: int = 32
    num_objects: int = 2
    num_classes: int = 3
    noise_sigma: float = 0.03
    seed: int = 0
    palette: tuple = DEFAULT_PALETTE
    objects: tuple | None = None

    def __post_init__(self):
        if self.width < 8 or self.height < 8 or self.width % 8 or self.height % 8:
            raise ValueError(f"scene size must be a positive multiple of 8, got {self.height}x{self.width}")
        if self.num_objects < 1:
            raise ValueError(f"need at least one object, got {self.num_objects}")
        if self.num_classes < 1 or self.num_classes + 1 > len(self.palette):
            raise ValueError(f"palette has no colors for {self.num_classes} foreground classes")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        for obj in self.objects or ():
            if obj.shape not in SHAPES:
                raise ValueError(f"unknown shape {obj.shape!r}")
            if not 1 <= obj.class_id <= self.num_classes:
                raise ValueError(f"object class {obj.class_id} outside 1..{self.num_classes}")
            if (obj.top < 0 or obj.left < 0 or obj.height < 1 or obj.width < 1
                    or obj.top + obj.height > self.height or obj.left + obj.width > self.width):
                raise ValueError(f"object {obj} exceeds the {self.height}x{self.width} image")

    @property
    def total_classes(self) -> int:
        return self.num_classes + 1


@dataclass(frozen=True)
class DegradeSpec:
    keep_fraction: float = 0.35
    blur_sigma: float = 2.0
    spurious_rate: float = 0.05
    spurious_range: tuple = (0.2, 0.6)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.keep_fraction <= 1:
            raise ValueError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma must be non-negative, got {self.blur_sigma}")
        if not 0 <= self.spurious_rate <= 1:
            raise ValueError(f"spurious_rate must be in [0, 1], got {self.spurious_rate}")


@dataclass
class Scene:
    image: np.ndarray          # (H, W, 3) uint8
    labels: np.ndarray         # (H, W) int32
    tags: np.ndarray           # (num_classes,) float32, foreground only
    features: list = field(default_factory=list)

    @property
    def total_classes(self) -> int:
        return len(self.tags) + 1


def shape_mask(obj: ObjectSpec, height: int, width: int) -> np.ndarray:
    """Rasterize ``obj`` by testing pixel centres."""
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    top, left, h, w = obj.top, obj.left, obj.height, obj.width
    if obj.shape == "rectangle":
        return (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
    if obj.shape == "ellipse":
        cy, cx = top + h / 2, left + w / 2
        return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    # apex at top centre, base along the bottom edge
    apex = np.array([left + w / 2, top])
    verts = [apex, np.array([left, top + h]), np.array([left + w, top + h])]
    inside = np.ones((height, width), dtype=bool)
    for a, b in zip(verts, verts[1:] + verts[:1]):
        cross = (b[0] - a[0]) * (yy - a[1]) - (b[1] - a[1]) * (xx - a[0])
        inside &= cross <= 0
    return inside


def analytic_area(obj: ObjectSpec) -> float:
    if obj.shape == "rectangle":
        return float(obj.height * obj.width)
    if obj.shape == "ellipse":
        return float(np.pi * obj.height * obj.width / 4)
    return obj.height * obj.width / 2


def _random_objects(spec: SceneSpec, rng) -> list[ObjectSpec]:
    objs = []
    for _ in range(spec.num_objects):
        h = int(rng.integers(spec.height * 3 // 10, spec.height * 6 // 10 + 1))
        w = int(rng.integers(spec.width * 3 // 10, spec.width * 6 // 10 + 1))
        top = int(rng.integers(0, spec.height - h + 1))
        left = int(rng.integers(0, spec.width - w + 1))
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        cls = int(rng.integers(1, spec.num_classes + 1))
        objs.append(ObjectSpec(shape, cls, top, left, h, w))
    return objs


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    return (labels[None] == np.arange(num_classes)[:, None, None]).astype(dtype)


def avg_pool(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x.copy()
    c, h, w = x.shape
    return x.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def feature_pyramid(image: np.ndarray, labels: np.ndarray, num_classes: int, rng) -> list:
    """Stand-in backbone features: pooled colors plus noisy pooled class indicators."""
    colors = image.transpose(2, 0, 1).astype(np.float32) / 255.0
    onehot = one_hot(labels, num_classes)
    levels = []
    for factor, sigma in zip(PYRAMID_SCALES, PYRAMID_NOISE):
        ind = avg_pool(onehot, factor)
        ind = ind + rng.normal(0.0, sigma, ind.shape).astype(np.float32)
        levels.append(np.concatenate([avg_pool(colors, factor), ind]).astype(np.float32))
    return levels


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    objects = list(spec.objects) if spec.objects is not None else _random_objects(spec, rng)
    labels = np.zeros((spec.height, spec.width), dtype=np.int32)
    for obj in objects:
        labels[shape_mask(obj, spec.height, spec.width)] = obj.class_id
    palette = np.asarray(spec.palette, dtype=np.float64)
    color = palette[labels]
    if spec.noise_sigma > 0:
        color = color + rng.normal(0.0, spec.noise_sigma, color.shape)
    image = np.clip(np.rint(color * 255), 0, 255).astype(np.uint8)
    tags = np.zeros(spec.num_classes, dtype=np.float32)
    present = np.unique(labels)
    tags[present[present > 0] - 1] = 1
    features = feature_pyramid(image, labels, spec.total_classes, rng)
    return Scene(image, labels, tags, features)


def _sub_blob(mask: np.ndarray, keep: float, rng) -> np.ndarray:
    """Pixels of ``mask`` closest to a random seed pixel, ``keep`` of its area."""
    coords = np.argwhere(mask)
    n_keep = max(1, int(round(keep * len(coords))))
    if n_keep >= len(coords):
        return mask.copy()
    seed = coords[rng.integers(len(coords))]
    d2 = ((coords - seed) ** 2).sum(axis=1)
    chosen = coords[np.argsort(d2, kind="stable")[:n_keep]]
    out = np.zeros_like(mask)
    out[chosen[:, 0], chosen[:, 1]] = True
    return out


def degrade_to_cam(labels, spec: DegradeSpec | None = None, num_classes: int | None = None) -> np.ndarray:
    """Partial, blurred, leaky CAM stack of shape (num_classes, H, W).

    ``num_classes`` counts the background; it defaults to ``labels.max() + 1``.
    Absent classes get all-zero channels and the background channel is
    ``1 - max`` over the foreground channels.
    """
    spec = spec or DegradeSpec()
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    rng = np.random.default_rng(spec.seed)
    cam = np.zeros((k,) + labels.shape, dtype=np.float64)
    for c in range(1, k):
        mask = labels == c
        if not mask.any():
            continue
        act = _sub_blob(mask, spec.keep_fraction, rng).astype(np.float64)
        if spec.blur_sigma > 0:
            act = gaussian_blur(act, spec.blur_sigma)
            act /= act.max()
        if spec.spurious_rate > 0:
            hits = (~mask) & (rng.random(labels.shape) < spec.spurious_rate)
            lo, hi = spec.spurious_range
            act = np.where(hits, np.maximum(act, rng.uniform(lo, hi, labels.shape)), act)
        cam[c] = act
    if k > 1:
        cam[0] = 1.0 - cam[1:].max(axis=0)
    else:
        cam[0] = 1.0
    return cam.astype(np.float32)


def boundary_training_pairs(count: int, spec: SceneSpec | None = None, seed: int = 0,
                            canny_config: CannyConfig | None = None):
    """``count`` seeded ``(features, canny_map, target, tags)`` batches for boundary training.

    Scene ``i`` uses seed ``seed + i``; the target is the thickness-1
    boundary stack of the ground-truth labels.
    """
    spec = spec or SceneSpec()
    pairs = []
    for i in range(count):
        scene = generate_scene(replace(spec, seed=seed + i))
        target = label_to_boundary(scene.labels, scene.total_classes)
        pairs.append((scene.features, canny(scene.image, canny_config), target, scene.tags))
    return pairs
