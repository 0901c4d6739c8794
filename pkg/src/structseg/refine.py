"""CAM post-processing: boundary-guided smoothing, random-walk diffusion, pseudo labels."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import solveh_banded

from .loss import LossConfig, _diff, _gate, active_mask, psi, total_smoothness


@dataclass(frozen=True)
class RefineConfig:
    steps: int = 100
    step_size: float = 0.05
    fidelity_mu: float = 1.0
    rw_beta: float = 8.0
    rw_iters: int = 16
    bg_threshold: float = 0.25
    affinity_radius: int = 4
    affinity_sigma: float = 0.1
    solver: str = "mm"
    tol: float = 1e-10

    def __post_init__(self):
        for name in ("steps", "step_size", "fidelity_mu", "rw_beta", "rw_iters",
                     "bg_threshold", "affinity_radius", "affinity_sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.solver not in ("mm", "gd"):
            raise ValueError(f"solver must be 'mm' or 'gd', got {self.solver!r}")
        if self.tol < 0:
            raise ValueError(f"tol must be non-negative, got {self.tol}")


def smoothing_objective(cam, cam0, guide, tags, config: RefineConfig, loss_config: LossConfig):
    """``lambda2 * L_S(C) + mu * ||C - C0||^2`` and its gradient."""
    ls, g = total_smoothness(cam, guide, tags, loss_config)
    diff = cam - cam0
    value = loss_config.lambda2 * ls + config.fidelity_mu * float(np.sum(diff * diff))
    return value, loss_config.lambda2 * g + 2 * config.fidelity_mu * diff


@functools.lru_cache(maxsize=16)
def _stencil_pattern(h: int, w: int):
    """COO pattern of ``D^T diag(q) D`` for each difference operator on an h x w grid.

    Returns ``{(order, axis): (term_index, rows, cols, coef)}`` so that the
    matrix data for weights ``q`` is ``q[term_index] * coef``.
    """
    idx = np.arange(h * w).reshape(h, w)
    out = {}
    for order, taps in ((1, ((0, -1.0), (1, 1.0))), (2, ((-1, 1.0), (0, -2.0), (1, 1.0)))):
        for axis in (1, 2):
            n = h if axis == 1 else w
            lo = 0 if order == 1 else 1
            hi = n - 1
            centers = np.arange(lo, hi)
            if axis == 1:
                terms = idx[centers, :]
                cols = [idx[centers + off, :] for off, _ in taps]
            else:
                terms = idx[:, centers]
                cols = [idx[:, centers + off] for off, _ in taps]
            t_all, r_all, c_all, k_all = [], [], [], []
            for (_, va), ca in zip(taps, cols):
                for (_, vb), cb in zip(taps, cols):
                    t_all.append(terms.ravel())
                    r_all.append(ca.ravel())
                    c_all.append(cb.ravel())
                    k_all.append(np.full(terms.size, va * vb))
            out[(order, axis)] = tuple(np.concatenate(a) for a in (t_all, r_all, c_all, k_all))
    return out


def _mm_target(cam, cam0, guide, channel, config: RefineConfig, loss_config: LossConfig):
    """Minimizer of the quadratic majorizer of the objective for one channel.

    Each Charbonnier term ``psi(a)`` is bounded above by a quadratic that
    touches it at the current ``a``; the bound's minimizer solves a sparse
    SPD system.
    """
    _, h, w = cam.shape
    n = h * w
    rows, cols, data = [], [], []
    pattern = _stencil_pattern(h, w)
    c, s = cam[channel][None], guide[channel][None]
    for order, weight in ((1, 1.0), (2, loss_config.lambda_s)):
        for axis in (1, 2):
            gate = _gate(s, order, axis, loss_config)[0].ravel()
            a = _diff(c, order, axis)[0].ravel() * gate
            q = loss_config.lambda2 * weight * gate * gate / psi(a, loss_config.psi_eps)
            t, r, cc, coef = pattern[(order, axis)]
            rows.append(r)
            cols.append(cc)
            data.append(q[t] * coef)
    rows, cols, data = (np.concatenate(v) for v in (rows, cols, data))
    # the system is SPD with half-bandwidth 2W; store its upper band
    upper = rows <= cols
    band = 2 * w if h > 2 else w
    flat = (band + rows[upper] - cols[upper]) * n + cols[upper]
    ab = np.bincount(flat, weights=data[upper], minlength=(band + 1) * n).reshape(band + 1, n)
    ab[band] += 2 * config.fidelity_mu
    rhs = 2 * config.fidelity_mu * cam0[channel].ravel()
    return solveh_banded(ab, rhs, check_finite=False).reshape(h, w)


def refine_cam_by_smoothness(cam0, guide, tags=None, config: RefineConfig | None = None,
                             loss_config: LossConfig | None = None, init=None,
                             return_history: bool = False):
    """Minimize ``lambda2 * L_S(C) + mu * ||C - C0||^2`` over C in [0, 1].

    Runs at most ``config.steps`` descent iterations from ``init`` (default
    ``cam0``). With ``solver="mm"`` each step moves toward the minimizer of a
    quadratic majorizer of the objective, i.e. a gradient step preconditioned
    by the majorizer's Hessian; ``solver="gd"`` takes plain gradient steps of
    ``step_size``. Iterates are clipped to [0, 1] and a step that would raise
    the objective is halved (up to 20 times), so the objective never
    increases. Stops early once a step gains less than ``tol`` relative.
    Channels of inactive classes are returned unchanged.
    """
    config = config or RefineConfig()
    loss_config = loss_config or LossConfig()
    cam0 = np.asarray(cam0, dtype=np.float64)
    guide = np.asarray(guide, dtype=np.float64)
    if cam0.shape != guide.shape:
        raise ValueError(f"cam shape {cam0.shape} does not match guide shape {guide.shape}")
    mask = active_mask(tags, cam0.shape[0])
    cam = cam0.copy() if init is None else np.asarray(init, dtype=np.float64).copy()
    if cam.shape != cam0.shape:
        raise ValueError(f"init shape {cam.shape} does not match cam shape {cam0.shape}")
    value, grad = smoothing_objective(cam, cam0, guide, tags, config, loss_config)
    history = [value]
    if loss_config.lambda2 == 0:
        cam = cam0
    step = config.step_size
    for _ in range(config.steps if loss_config.lambda2 > 0 else 0):
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient during CAM refinement")
        if config.solver == "mm":
            direction = np.zeros_like(cam)
            for c in np.flatnonzero(mask):
                direction[c] = _mm_target(cam, cam0, guide, c, config, loss_config) - cam[c]
            t = 1.0
        else:
            direction = -grad
            t = step
        for _ in range(20):
            cand = cam.copy()
            cand[mask] = np.clip(cam[mask] + t * direction[mask], 0.0, 1.0)
            cand_value, cand_grad = smoothing_objective(cand, cam0, guide, tags, config, loss_config)
            if cand_value <= value:
                break
            t *= 0.5
        else:
            break
        if config.solver == "gd":
            step = t
        gain = value - cand_value
        cam, value, grad = cand, cand_value, cand_grad
        history.append(value)
        if gain <= config.tol * max(1.0, abs(value)):
            break
    out = cam.astype(np.float32)
    return (out, history) if return_history else out


@dataclass
class AffinityGraph:
    """Symmetric sparse pixel affinities over an ``height x width`` grid."""

    height: int
    width: int
    weights: sparse.csr_matrix

    def __post_init__(self):
        n = self.height * self.width
        self.weights = sparse.csr_matrix(self.weights)
        if self.weights.shape != (n, n):
            raise ValueError(
                f"affinity matrix shape {self.weights.shape} does not match {self.height}x{self.width} grid"
            )

    @classmethod
    def identity(cls, height: int, width: int) -> "AffinityGraph":
        return cls(height, width, sparse.identity(height * width, format="csr"))

    def is_symmetric(self, tol: float = 0.0) -> bool:
        return abs(self.weights - self.weights.T).max() <= tol if self.weights.nnz else True

    def transition(self, beta: float = 1.0) -> sparse.csr_matrix:
        """Row-stochastic matrix ``D^-1 W^beta`` (elementwise power)."""
        w = self.weights.power(beta).tocsr()
        deg = np.asarray(w.sum(axis=1)).ravel()
        if np.any(deg <= 0):
            raise ValueError("affinity graph has a pixel with no positive edge")
        return sparse.diags(1.0 / deg) @ w

    def to_tensors(self) -> dict:
        coo = self.weights.tocoo()
        return {
            "graph.shape": np.asarray([self.height, self.width], dtype=np.float32),
            "graph.rows": coo.row.astype(np.float32),
            "graph.cols": coo.col.astype(np.float32),
            "graph.weights": coo.data.astype(np.float32),
        }

    @classmethod
    def from_tensors(cls, tensors: dict) -> "AffinityGraph":
        h, w = (int(v) for v in tensors["graph.shape"])
        rows = tensors["graph.rows"].astype(np.int64)
        cols = tensors["graph.cols"].astype(np.int64)
        data = tensors["graph.weights"].astype(np.float64)
        return cls(h, w, sparse.coo_matrix((data, (rows, cols)), shape=(h * w, h * w)))


def build_color_affinity(image, config: RefineConfig | None = None) -> AffinityGraph:
    """``exp(-||x_i - x_j||^2 / sigma^2)`` for pixels within Chebyshev radius ``r``.

    Colors are scaled to [0, 1]. Self-edges have weight one.
    """
    config = config or RefineConfig()
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    if image.size == 0:
        raise ValueError("image is empty")
    h, w = image.shape[:2]
    colors = image.astype(np.float64)
    if np.issubdtype(image.dtype, np.integer):
        colors /= 255.0
    idx = np.arange(h * w).reshape(h, w)
    r = int(config.affinity_radius)
    rows, cols, vals = [], [], []
    for dy in range(-min(r, h - 1), min(r, h - 1) + 1):
        for dx in range(-min(r, w - 1), min(r, w - 1) + 1):
            ys = slice(max(0, -dy), min(h, h - dy))
            xs = slice(max(0, -dx), min(w, w - dx))
            yt = slice(max(0, dy), min(h, h + dy))
            xt = slice(max(0, dx), min(w, w + dx))
            d2 = ((colors[ys, xs] - colors[yt, xt]) ** 2).sum(axis=-1)
            rows.append(idx[ys, xs].ravel())
            cols.append(idx[yt, xt].ravel())
            vals.append(np.exp(-d2 / config.affinity_sigma ** 2).ravel())
    weights = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(h * w, h * w)
    )
    return AffinityGraph(h, w, weights.tocsr())


def random_walk_refine(cam, graph: AffinityGraph, config: RefineConfig | None = None,
                       conserve_mass: bool = False) -> np.ndarray:
    """Diffuse every channel ``rw_iters`` times through ``T = rownorm(W ** beta)``.

    By default each pixel becomes a convex combination of its neighbours
    (``x <- T x``), which keeps values inside the input range. With
    ``conserve_mass`` the transpose is applied instead (``x <- T^T x``), which
    keeps each channel's total.
    """
    config = config or RefineConfig()
    cam = np.asarray(cam)
    k, h, w = cam.shape
    if (h, w) != (graph.height, graph.width):
        raise ValueError(f"cam size {h}x{w} does not match graph size {graph.height}x{graph.width}")
    t = graph.transition(config.rw_beta)
    if conserve_mass:
        t = t.T.tocsr()
    x = cam.reshape(k, h * w).T.astype(np.float64)
    for _ in range(int(config.rw_iters)):
        x = t @ x
    return x.T.reshape(k, h, w).astype(cam.dtype if np.issubdtype(cam.dtype, np.floating) else np.float32)


def cam_to_pseudo_label(cam, tags=None, bg_threshold: float = 0.25) -> np.ndarray:
    """Argmax over active foreground channels; background where the winner is weak.

    Ties go to the lowest class index. Returns an int32 (H, W) label map.
    """
    cam = np.asarray(cam)
    k = cam.shape[0]
    mask = active_mask(tags, k)
    mask[0] = False
    if not mask.any():
        return np.zeros(cam.shape[1:], dtype=np.int32)
    scores = np.where(mask[:, None, None], cam, -np.inf)
    scores[0] = -np.inf
    best = np.argmax(scores, axis=0)
    winner = np.take_along_axis(scores, best[None], axis=0)[0]
    return np.where(winner >= bg_threshold, best, 0).astype(np.int32)
