"""Boundary-guided smoothness losses, boundary cross-entropy and the total objective.

Every loss returns ``(value, gradient)`` with the gradient taken w.r.t. its
first argument. Values are plain sums over pixels unless
``LossConfig.normalize`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

LAMBDA2_SWEEP = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 10.0
    lambda_s: float = 10.0
    lambda1: float = 0.05
    lambda2: float = 1.0
    psi_eps: float = 1e-6
    bce_clamp: float = 1e-7
    normalize: bool = False
    # "gradient": gate on |delta S| ; "direct": gate on S itself
    guide_mode: str = "gradient"

    def __post_init__(self):
        for name in ("alpha", "lambda_s", "psi_eps", "bce_clamp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.bce_clamp < 0.5:
            raise ValueError(f"bce_clamp must be below 0.5, got {self.bce_clamp}")
        if self.guide_mode not in ("gradient", "direct"):
            raise ValueError(f"guide_mode must be 'gradient' or 'direct', got {self.guide_mode!r}")

    def with_lambda2(self, value: float) -> "LossConfig":
        return replace(self, lambda2=value)

    def lambda2_sweep(self):
        return [self.with_lambda2(v) for v in LAMBDA2_SWEEP]


def psi(s, eps: float = 1e-6):
    """Charbonnier penalty ``sqrt(s**2 + eps)``."""
    s = np.asarray(s, dtype=np.float64) if np.isscalar(s) else s
    return np.sqrt(s * s + eps)


def psi_grad(s, eps: float = 1e-6):
    return s / np.sqrt(s * s + eps)


def active_mask(tags, num_channels: int) -> np.ndarray:
    """Boolean channel mask from image tags.

    ``tags`` of length ``num_channels - 1`` are foreground flags and the
    background channel 0 is switched on. A length ``num_channels`` vector is
    taken as the full mask, which allows turning background off.
    """
    if tags is None:
        return np.ones(num_channels, dtype=bool)
    tags = np.asarray(tags).ravel().astype(bool)
    if len(tags) == num_channels - 1:
        return np.concatenate([[True], tags])
    if len(tags) == num_channels:
        return tags
    raise ValueError(f"tags of length {len(tags)} do not fit {num_channels} channels")


# Finite-difference stencils. Every direction yields H*W terms; terms whose
# stencil would leave the image are zero.

def _diff(x: np.ndarray, order: int, axis: int) -> np.ndarray:
    out = np.zeros_like(x)
    n = x.shape[axis]
    sl = [slice(None)] * x.ndim

    def at(a, b):
        s = list(sl)
        s[axis] = slice(a, b)
        return tuple(s)

    if order == 1:
        if n > 1:
            out[at(0, n - 1)] = x[at(1, n)] - x[at(0, n - 1)]
    elif n > 2:
        out[at(1, n - 1)] = x[at(0, n - 2)] - 2 * x[at(1, n - 1)] + x[at(2, n)]
    return out


def _diff_adjoint(g: np.ndarray, order: int, axis: int) -> np.ndarray:
    out = np.zeros_like(g)
    n = g.shape[axis]
    sl = [slice(None)] * g.ndim

    def at(a, b):
        s = list(sl)
        s[axis] = slice(a, b)
        return tuple(s)

    if order == 1:
        if n > 1:
            out[at(1, n)] += g[at(0, n - 1)]
            out[at(0, n - 1)] -= g[at(0, n - 1)]
    elif n > 2:
        inner = g[at(1, n - 1)]
        out[at(0, n - 2)] += inner
        out[at(1, n - 1)] -= 2 * inner
        out[at(2, n)] += inner
    return out


def _stencil_max(s: np.ndarray, order: int, axis: int) -> np.ndarray:
    """Largest guide value touched by each stencil (for direct gating)."""
    n = s.shape[axis]
    shifted = np.take(s, np.minimum(np.arange(n) + 1, n - 1), axis=axis)
    out = np.maximum(s, shifted)
    if order == 2:
        out = np.maximum(out, np.take(s, np.maximum(np.arange(n) - 1, 0), axis=axis))
    return out


def _gate(guide: np.ndarray, order: int, axis: int, config: LossConfig) -> np.ndarray:
    if config.guide_mode == "gradient":
        return np.exp(-config.alpha * np.abs(_diff(guide, order, axis)))
    return np.exp(-config.alpha * _stencil_max(guide, order, axis))


def smoothness_loss(cam, guide, tags=None, order: int = 1, config: LossConfig | None = None):
    """Boundary-gated smoothness of a CAM stack.

    Sums ``psi(|d C| * exp(-alpha |d S|))`` over active channels, all pixels
    and both axes, where ``d`` is the forward difference (``order=1``) or the
    central second difference (``order=2``). Returns ``(value, grad_cam)``.
    """
    config = config or LossConfig()
    cam = np.asarray(cam)
    guide = np.asarray(guide)
    if cam.shape != guide.shape:
        raise ValueError(f"cam shape {cam.shape} does not match guide shape {guide.shape}")
    if cam.ndim != 3:
        raise ValueError(f"cam must be (K, H, W), got shape {cam.shape}")
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    mask = active_mask(tags, cam.shape[0])
    dtype = cam.dtype if np.issubdtype(cam.dtype, np.floating) else np.float64
    grad = np.zeros(cam.shape, dtype=dtype)
    if not mask.any():
        return 0.0, grad
    c = cam[mask].astype(dtype, copy=False)
    s = guide[mask].astype(dtype, copy=False)
    value = 0.0
    g = np.zeros_like(c)
    for axis in (1, 2):
        w = _gate(s, order, axis, config)
        a = _diff(c, order, axis) * w
        value += float(np.sum(psi(a, config.psi_eps)))
        g += _diff_adjoint(psi_grad(a, config.psi_eps) * w, order, axis)
    if config.normalize:
        scale = 1.0 / (cam.shape[1] * cam.shape[2])
        value *= scale
        g *= scale
    grad[mask] = g
    return value, grad


def combine_smoothness(l1: float, l2: float, g1, g2, config: LossConfig | None = None):
    """First-order plus ``lambda_s`` times second-order smoothness."""
    config = config or LossConfig()
    g1, g2 = np.asarray(g1), np.asarray(g2)
    if g1.shape != g2.shape:
        raise ValueError(f"gradient shapes differ: {g1.shape} vs {g2.shape}")
    return l1 + config.lambda_s * l2, g1 + config.lambda_s * g2


def total_smoothness(cam, guide, tags=None, config: LossConfig | None = None):
    """Combined smoothness loss and its gradient in one call."""
    config = config or LossConfig()
    l1, g1 = smoothness_loss(cam, guide, tags, 1, config)
    l2, g2 = smoothness_loss(cam, guide, tags, 2, config)
    return combine_smoothness(l1, l2, g1, g2, config)


def boundary_bce(pred, target, tags=None, clamp: float = 1e-7, normalize: bool = False):
    """Summed binary cross-entropy of predicted boundaries against supervision.

    ``pred`` is clamped to ``[clamp, 1 - clamp]``; clamped entries get zero
    gradient. Only channels of active classes contribute.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} does not match target shape {target.shape}")
    mask = active_mask(tags, pred.shape[0]) if pred.ndim == 3 else None
    dtype = pred.dtype if np.issubdtype(pred.dtype, np.floating) else np.float64
    p = np.clip(pred.astype(dtype, copy=False), clamp, 1 - clamp)
    t = target.astype(dtype, copy=False)
    terms = -(t * np.log(p) + (1 - t) * np.log1p(-p))
    grad = -(t / p - (1 - t) / (1 - p))
    grad = np.where((pred >= clamp) & (pred <= 1 - clamp), grad, 0.0).astype(dtype, copy=False)
    if mask is not None:
        terms = terms[mask]
        grad[~mask] = 0
    value = float(np.sum(terms))
    if normalize:
        scale = 1.0 / (pred.shape[-1] * pred.shape[-2])
        value *= scale
        grad = grad * scale
    return value, grad


def total_objective(base_loss: float, base_grad, l_b: float, grad_b, l_s: float, grad_s,
                    config: LossConfig | None = None):
    """Weighted sum ``base + lambda1 * L_B + lambda2 * L_S``.

    The base-model term is an opaque scalar and gradient supplied by the
    caller; its weight is fixed at one. Returns ``(value, grads)`` where
    ``grads`` maps ``"base"``, ``"boundary"`` and ``"smoothness"`` to the
    weighted gradients.
    """
    config = config or LossConfig()
    for name, v in (("base", base_loss), ("boundary", l_b), ("smoothness", l_s)):
        if not np.isfinite(v):
            raise ValueError(f"{name} loss is not finite: {v}")
    value = base_loss + config.lambda1 * l_b + config.lambda2 * l_s
    grads = {
        "base": base_grad,
        "boundary": None if grad_b is None else config.lambda1 * np.asarray(grad_b),
        "smoothness": None if grad_s is None else config.lambda2 * np.asarray(grad_s),
    }
    return value, grads
