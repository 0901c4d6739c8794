"""Dense (C, H, W) tensor kernels with hand-written backward passes.

Tensors are plain numpy arrays laid out channel-first. Operations keep the
floating dtype of their input, so float32 maps stay float32 while gradient
checks can run the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


def as_tensor(data, dtype=None) -> np.ndarray:
    """Coerce ``data`` to a rank-3 float array, promoting 2-D maps to one channel."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected a (C, H, W) tensor, got shape {arr.shape}")
    if dtype is None:
        dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DTYPE
    arr = arr.astype(dtype, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


@dataclass
class ConvKernel:
    """Weights of a same-padded convolution.

    ``weight`` has shape ``(out_channels, in_channels // groups, kh, kw)``.
    ``groups == in_channels`` with one input per group is the classic
    depthwise layer; the boundary head uses ``groups == K`` with two inputs
    per group so each class mixes its own pair of channels.
    """

    weight: np.ndarray
    bias: np.ndarray
    groups: int = 1

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.weight.ndim != 4:
            raise ValueError(f"kernel weight must be rank 4, got shape {self.weight.shape}")
        out_c, _, kh, kw = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kh}x{kw}")
        if self.bias.shape != (out_c,):
            raise ValueError(f"bias shape {self.bias.shape} does not match {out_c} output channels")
        if self.groups < 1 or out_c % self.groups:
            raise ValueError(f"{out_c} output channels not divisible into {self.groups} groups")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def depthwise(self) -> bool:
        return self.groups > 1

    @classmethod
    def zeros(cls, out_channels, in_channels, kh, kw=None, groups=1, dtype=DTYPE):
        kw = kh if kw is None else kw
        if in_channels % groups:
            raise ValueError(f"{in_channels} input channels not divisible into {groups} groups")
        return cls(np.zeros((out_channels, in_channels // groups, kh, kw), dtype=dtype),
                   np.zeros(out_channels, dtype=dtype), groups)

    @classmethod
    def glorot(cls, out_channels, in_channels, kh, kw=None, groups=1, rng=None, dtype=DTYPE):
        """Uniform init in +-sqrt(6 / (fan_in + fan_out)), zero bias."""
        rng = np.random.default_rng(rng)
        kernel = cls.zeros(out_channels, in_channels, kh, kw, groups, dtype)
        _, cin, kh, kw = kernel.weight.shape
        fan_in = cin * kh * kw
        fan_out = (out_channels // groups) * kh * kw
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        kernel.weight[...] = rng.uniform(-limit, limit, kernel.weight.shape)
        return kernel

    @classmethod
    def identity(cls, channels, dtype=DTYPE):
        """1x1 kernel that copies its input."""
        weight = np.eye(channels, dtype=dtype)[:, :, None, None]
        return cls(weight, np.zeros(channels, dtype=dtype))

    def copy(self) -> "ConvKernel":
        return ConvKernel(self.weight.copy(), self.bias.copy(), self.groups)

    def astype(self, dtype) -> "ConvKernel":
        return ConvKernel(self.weight.astype(dtype), self.bias.astype(dtype), self.groups)


def _check_conv_input(x: np.ndarray, kernel: ConvKernel):
    if x.ndim != 3:
        raise ValueError(f"conv2d expects a (C, H, W) tensor, got shape {x.shape}")
    if x.shape[0] != kernel.in_channels:
        raise ValueError(
            f"input shape {x.shape} does not match kernel shape {kernel.weight.shape} "
            f"(groups={kernel.groups}, expects {kernel.in_channels} input channels)"
        )


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    _, h, w = x.shape
    rows = np.clip(np.arange(-ph, h + ph), 0, h - 1)
    cols = np.clip(np.arange(-pw, w + pw), 0, w - 1)
    return x[:, rows[:, None], cols[None, :]]


def _unpad_adjoint(gpad: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Adjoint of edge padding: fold border gradients back onto the edge pixels."""
    g = gpad
    if ph:
        g = g.copy()
        g[:, ph, :] += g[:, :ph, :].sum(axis=1)
        g[:, -ph - 1, :] += g[:, -ph:, :].sum(axis=1)
        g = g[:, ph:-ph, :]
    if pw:
        g = g.copy()
        g[:, :, pw] += g[:, :, :pw].sum(axis=2)
        g[:, :, -pw - 1] += g[:, :, -pw:].sum(axis=2)
        g = g[:, :, pw:-pw]
    return g


def _im2col(xp: np.ndarray, kh: int, kw: int, groups: int) -> np.ndarray:
    """(groups, cin_g * kh * kw, H * W) patch matrix of an already padded input."""
    c = xp.shape[0]
    h, w = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if kh == 1 and kw == 1:
        return xp.reshape(groups, c // groups, h * w)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))      # (C, H, W, kh, kw)
    return win.transpose(0, 3, 4, 1, 2).reshape(groups, (c // groups) * kh * kw, h * w)


def conv2d(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Stride-1 cross-correlation with replicate padding; output keeps H x W."""
    _check_conv_input(x, kernel)
    kh, kw = kernel.kernel_size
    dtype = np.result_type(x.dtype, kernel.weight.dtype)
    xp = _pad(x.astype(dtype, copy=False), kh // 2, kw // 2)
    g = kernel.groups
    _, h, w = x.shape
    cols = _im2col(xp, kh, kw, g)
    wm = kernel.weight.astype(dtype, copy=False).reshape(g, kernel.out_channels // g, -1)
    out = np.matmul(wm, cols).reshape(kernel.out_channels, h, w)
    out += kernel.bias.astype(dtype, copy=False)[:, None, None]
    return out


def conv2d_backward(x: np.ndarray, kernel: ConvKernel, grad_out: np.ndarray):
    """Gradients of :func:`conv2d` w.r.t. its input and kernel.

    Returns ``(grad_input, grad_kernel)`` where ``grad_kernel`` is a
    :class:`ConvKernel` holding the weight and bias gradients.
    """
    _check_conv_input(x, kernel)
    expected = (kernel.out_channels,) + x.shape[1:]
    if grad_out.shape != expected:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match output shape {expected}")
    kh, kw = kernel.kernel_size
    ph, pw = kh // 2, kw // 2
    dtype = np.result_type(x.dtype, kernel.weight.dtype, grad_out.dtype)
    xp = _pad(x.astype(dtype, copy=False), ph, pw)
    go = grad_out.astype(dtype, copy=False)
    g = kernel.groups
    c, h, w = x.shape
    cols = _im2col(xp, kh, kw, g)
    gm = go.reshape(g, kernel.out_channels // g, h * w)
    wm = kernel.weight.astype(dtype, copy=False).reshape(g, kernel.out_channels // g, -1)
    gw = np.matmul(gm, cols.transpose(0, 2, 1)).reshape(kernel.weight.shape)
    gcols = np.matmul(wm.transpose(0, 2, 1), gm).reshape(c, kh, kw, h, w)
    gb = go.sum(axis=(1, 2))
    if kh == 1 and kw == 1:
        return gcols[:, 0, 0], ConvKernel(gw, gb, g)
    gxp = np.zeros(xp.shape, dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + h, j:j + w] += gcols[:, i, j]
    return _unpad_adjoint(gxp, ph, pw), ConvKernel(gw, gb, g)


@lru_cache(maxsize=64)
def _interp_cached(n_in: int, n_out: int) -> np.ndarray:
    scale = n_out / n_in
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    m.setflags(write=False)
    return m


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i holds the bilinear weights of output sample i (half-pixel centres)."""
    return _interp_cached(n_in, n_out).astype(dtype)


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize to ``(out_h, out_w)`` with align-corners off.

    Source coordinate for destination index ``d`` is ``(d + 0.5) / scale - 0.5``,
    clamped to the valid range.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    _, h, w = x.shape
    if out_h < h or out_w < w:
        raise ValueError(f"cannot upsample {h}x{w} to smaller size {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return x.copy()
    ry = _interp_matrix(h, out_h, x.dtype)
    rx = _interp_matrix(w, out_w, x.dtype)
    return ry @ x @ rx.T


def bilinear_upsample_backward(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    _, out_h, out_w = grad_out.shape
    if (out_h, out_w) == (in_h, in_w):
        return grad_out.copy()
    ry = _interp_matrix(in_h, out_h, grad_out.dtype)
    rx = _interp_matrix(in_w, out_w, grad_out.dtype)
    return ry.T @ grad_out @ rx


def concat_channels(inputs) -> np.ndarray:
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one tensor")
    size = inputs[0].shape[1:]
    for i, t in enumerate(inputs):
        if t.ndim != 3 or t.shape[1:] != size:
            raise ValueError(f"tensor {i} has shape {t.shape}, expected spatial size {size}")
    return np.concatenate(inputs, axis=0)


def split_channels(x: np.ndarray, sizes) -> list[np.ndarray]:
    """Inverse of :func:`concat_channels` given the per-part channel counts."""
    if sum(sizes) != x.shape[0]:
        raise ValueError(f"channel sizes {list(sizes)} do not sum to {x.shape[0]}")
    return np.split(x, np.cumsum(sizes)[:-1], axis=0)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))
