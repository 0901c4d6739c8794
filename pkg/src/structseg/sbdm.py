"""Semantic boundary detection module and its desk-scale SGD trainer.

Forward pass::

    U_i   = upsample(conv3x3(relu(conv1x1(F_i))))          per feature level
    init  = relu(conv3x3(relu(conv3x3(concat(U_i)))))      K channels
    B     = sigmoid(group_conv1x1(interleave(init, E)))    K groups of 2

``interleave`` orders channels ``[init_0, E, init_1, E, ...]`` so each
group of the final 1x1 layer sees one class's initial boundary and its
copy of the Canny map.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .eval import boundary_map_scores
from .loss import LossConfig, active_mask, boundary_bce
from .tensor import (
    ConvKernel,
    bilinear_upsample,
    bilinear_upsample_backward,
    concat_channels,
    conv2d,
    conv2d_backward,
    sigmoid,
    split_channels,
)

DEFAULT_WIDTH = 32
DEFAULT_HIDDEN = 64


@dataclass(frozen=True)
class TrainConfig:
    l_init: float = 0.01
    gamma: float = 0.9
    max_itr: int = 200
    momentum: float = 0.9
    seed: int = 0
    # global L2 cap on the lambda1-scaled gradient; None disables clipping
    clip_norm: float | None = 3.0

    def __post_init__(self):
        if not self.l_init > 0:
            raise ValueError(f"l_init must be positive, got {self.l_init}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.max_itr < 1:
            raise ValueError(f"max_itr must be >= 1, got {self.max_itr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be positive or None, got {self.clip_norm}")


def poly_lr(itr: int, config: TrainConfig) -> float:
    """``l_init * (1 - itr / max_itr) ** gamma``."""
    if not 0 <= itr <= config.max_itr:
        raise ValueError(f"iteration {itr} outside [0, {config.max_itr}]")
    return config.l_init * (1.0 - itr / config.max_itr) ** config.gamma


@dataclass
class SbdmParams:
    kernels: dict
    in_channels: tuple
    levels: tuple
    num_classes: int
    use_canny: bool = True
    velocity: dict = field(default_factory=dict)

    def copy(self) -> "SbdmParams":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "SbdmParams":
        out = self.copy()
        out.kernels = {k: v.astype(dtype) for k, v in self.kernels.items()}
        return out

    def names(self):
        return list(self.kernels)


def init_sbdm(in_channels, num_classes: int, levels=None, width: int = DEFAULT_WIDTH,
              hidden: int = DEFAULT_HIDDEN, use_canny: bool = True, seed=0) -> SbdmParams:
    """Glorot-initialised parameters.

    ``in_channels`` lists the channel count of every pyramid level the caller
    will pass to :func:`sbdm_forward`; ``levels`` picks the subset used.
    """
    in_channels = tuple(int(c) for c in in_channels)
    levels = tuple(range(len(in_channels))) if levels is None else tuple(levels)
    if not levels:
        raise ValueError("at least one feature level is required")
    for lv in levels:
        if not 0 <= lv < len(in_channels):
            raise ValueError(f"level {lv} not in pyramid of {len(in_channels)} levels")
    rng = np.random.default_rng(seed)
    kernels = {}
    for lv in levels:
        kernels[f"u{lv}.conv1"] = ConvKernel.glorot(width, in_channels[lv], 1, rng=rng)
        kernels[f"u{lv}.conv3"] = ConvKernel.glorot(width, width, 3, rng=rng)
    kernels["trunk.conv1"] = ConvKernel.glorot(hidden, width * len(levels), 3, rng=rng)
    kernels["trunk.conv2"] = ConvKernel.glorot(num_classes, hidden, 3, rng=rng)
    kernels["head"] = ConvKernel.glorot(num_classes, 2 * num_classes, 1, groups=num_classes, rng=rng)
    return SbdmParams(kernels, in_channels, levels, num_classes, use_canny)


def interleave(init: np.ndarray, edges: np.ndarray) -> np.ndarray:
    k = init.shape[0]
    out = np.empty((2 * k,) + init.shape[1:], dtype=np.result_type(init, edges))
    out[0::2] = init
    out[1::2] = edges[0]
    return out


def _check_inputs(features, canny_map, params: SbdmParams):
    if len(features) != len(params.in_channels):
        raise ValueError(
            f"got {len(features)} feature levels, parameters expect {len(params.in_channels)}"
        )
    for i, (f, c) in enumerate(zip(features, params.in_channels)):
        if f.ndim != 3 or f.shape[0] != c:
            raise ValueError(f"feature level {i} has shape {f.shape}, expected {c} channels")
    if canny_map.ndim != 3 or canny_map.shape[0] != 1:
        raise ValueError(f"canny map must be (1, H, W), got shape {canny_map.shape}")


def _forward(features, canny_map, params: SbdmParams):
    _check_inputs(features, canny_map, params)
    _, h, w = canny_map.shape
    kn = params.kernels
    cache = {"levels": {}}
    ups = []
    for lv in params.levels:
        f = features[lv]
        a1 = conv2d(f, kn[f"u{lv}.conv1"])
        r1 = np.maximum(a1, 0)
        b = conv2d(r1, kn[f"u{lv}.conv3"])
        ups.append(bilinear_upsample(b, h, w))
        cache["levels"][lv] = (f, a1, r1, b.shape)
    cat = concat_channels(ups)
    z1 = conv2d(cat, kn["trunk.conv1"])
    h1 = np.maximum(z1, 0)
    z2 = conv2d(h1, kn["trunk.conv2"])
    init = np.maximum(z2, 0)
    edges = canny_map if params.use_canny else np.zeros_like(canny_map)
    inter = interleave(init, edges.astype(init.dtype, copy=False))
    logits = conv2d(inter, kn["head"])
    cache.update(cat=cat, z1=z1, h1=h1, z2=z2, inter=inter, widths=[u.shape[0] for u in ups])
    # keep probabilities strictly inside (0, 1) once the sigmoid saturates
    eps = np.finfo(logits.dtype).eps
    return np.clip(sigmoid(logits), eps, 1 - eps), cache


def sbdm_forward(features, canny_map, params: SbdmParams) -> np.ndarray:
    """Boundary probabilities of shape (K, H, W) at the Canny map's resolution."""
    prob, _ = _forward(features, canny_map, params)
    return prob


def sbdm_backward(grad_prob: np.ndarray, prob: np.ndarray, cache, params: SbdmParams) -> dict:
    """Gradients of a scalar loss w.r.t. every kernel, given dL/dB."""
    kn = params.kernels
    grads = {}
    g_logits = grad_prob * prob * (1 - prob)
    g_inter, grads["head"] = conv2d_backward(cache["inter"], kn["head"], g_logits)
    g_z2 = g_inter[0::2] * (cache["z2"] > 0)
    g_h1, grads["trunk.conv2"] = conv2d_backward(cache["h1"], kn["trunk.conv2"], g_z2)
    g_z1 = g_h1 * (cache["z1"] > 0)
    g_cat, grads["trunk.conv1"] = conv2d_backward(cache["cat"], kn["trunk.conv1"], g_z1)
    for lv, g_up in zip(params.levels, split_channels(g_cat, cache["widths"])):
        f, a1, r1, b_shape = cache["levels"][lv]
        g_b = bilinear_upsample_backward(g_up, b_shape[1], b_shape[2])
        g_r1, grads[f"u{lv}.conv3"] = conv2d_backward(r1, kn[f"u{lv}.conv3"], g_b)
        _, grads[f"u{lv}.conv1"] = conv2d_backward(f, kn[f"u{lv}.conv1"], g_r1 * (a1 > 0))
    return grads


def sbdm_loss_and_grads(features, canny_map, target, tags, params: SbdmParams,
                        loss_config: LossConfig | None = None):
    """Boundary cross-entropy of the module's prediction and its parameter gradients."""
    loss_config = loss_config or LossConfig()
    prob, cache = _forward(features, canny_map, params)
    value, g_prob = boundary_bce(prob, target, tags, loss_config.bce_clamp, loss_config.normalize)
    return value, sbdm_backward(g_prob, prob, cache, params)


def sbdm_train_step(params: SbdmParams, batch, itr: int, config: TrainConfig,
                    loss_config: LossConfig | None = None):
    """One SGD-with-momentum step on ``lambda1 * L_B`` at rate ``poly_lr(itr)``.

    The scaled gradient is rescaled to at most ``config.clip_norm`` in global
    L2 norm before it enters the momentum buffer.

    ``batch`` is ``(features, canny_map, target, tags)``. Returns the updated
    parameters (a new object) and the boundary loss before the step.
    """
    loss_config = loss_config or LossConfig()
    features, canny_map, target, tags = batch
    value, grads = sbdm_loss_and_grads(features, canny_map, target, tags, params, loss_config)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite boundary loss at iteration {itr}")
    lr = poly_lr(itr, config)
    scale = loss_config.lambda1
    if config.clip_norm is not None:
        norm = scale * np.sqrt(sum(float(np.sum(np.square(g.weight, dtype=np.float64)))
                                   + float(np.sum(np.square(g.bias, dtype=np.float64)))
                                   for g in grads.values()))
        if norm > config.clip_norm:
            scale *= config.clip_norm / norm
    new = params.copy()
    for name, g in grads.items():
        k = new.kernels[name]
        vw, vb = new.velocity.get(name, (np.zeros_like(k.weight), np.zeros_like(k.bias)))
        vw = config.momentum * vw + scale * g.weight.astype(vw.dtype)
        vb = config.momentum * vb + scale * g.bias.astype(vb.dtype)
        new.velocity[name] = (vw, vb)
        if lr > 0:
            k.weight -= (lr * vw).astype(k.weight.dtype)
            k.bias -= (lr * vb).astype(k.bias.dtype)
    return new, value


def train_sbdm(params: SbdmParams, batches, config: TrainConfig,
               loss_config: LossConfig | None = None, callback=None):
    """Run ``config.max_itr`` steps cycling over ``batches``; returns (params, losses)."""
    batches = list(batches)
    losses = []
    for itr in range(config.max_itr):
        params, value = sbdm_train_step(params, batches[itr % len(batches)], itr, config, loss_config)
        losses.append(value)
        if callback is not None:
            callback(itr, value)
    return params, losses


def evaluate_sbdm(params: SbdmParams, batches, loss_config: LossConfig | None = None,
                  threshold: float = 0.5, tolerance: int = 2):
    """Mean boundary loss and pooled boundary F1 over ``batches``.

    Predictions are thresholded at ``threshold``; precision and recall are
    pooled over every active channel of every batch before forming F1.
    """
    loss_config = loss_config or LossConfig()
    losses, counts = [], np.zeros(4)
    for features, canny_map, target, tags in batches:
        prob = sbdm_forward(features, canny_map, params)
        losses.append(boundary_bce(prob, target, tags, loss_config.bce_clamp, loss_config.normalize)[0])
        mask = active_mask(tags, prob.shape[0])
        counts += boundary_map_scores(prob[mask] >= threshold, target[mask] > 0.5, tolerance)
    matched_pred, n_pred, matched_truth, n_truth = counts
    precision = matched_pred / n_pred if n_pred else 0.0
    recall = matched_truth / n_truth if n_truth else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return float(np.mean(losses)), float(f1)


def params_to_tensors(params: SbdmParams) -> dict:
    """Flatten parameters into named arrays for the tensor container."""
    out = {}
    for name, k in params.kernels.items():
        out[f"{name}.weight"] = k.weight
        out[f"{name}.bias"] = k.bias
    out["meta.in_channels"] = np.asarray(params.in_channels, dtype=np.float32)
    out["meta.levels"] = np.asarray(params.levels, dtype=np.float32)
    out["meta.num_classes"] = np.asarray([params.num_classes], dtype=np.float32)
    out["meta.use_canny"] = np.asarray([float(params.use_canny)], dtype=np.float32)
    return out


def params_from_tensors(tensors: dict) -> SbdmParams:
    try:
        in_channels = tuple(int(c) for c in tensors["meta.in_channels"])
        levels = tuple(int(c) for c in tensors["meta.levels"])
        num_classes = int(tensors["meta.num_classes"][0])
        use_canny = bool(tensors["meta.use_canny"][0])
    except KeyError as e:
        raise ValueError(f"checkpoint is missing {e.args[0]}") from None
    kernels = {}
    for key in tensors:
        if key.endswith(".weight"):
            name = key[: -len(".weight")]
            groups = num_classes if name == "head" else 1
            kernels[name] = ConvKernel(tensors[key], tensors[f"{name}.bias"], groups)
    return SbdmParams(kernels, in_channels, levels, num_classes, use_canny)
