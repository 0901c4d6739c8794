"""Central finite-difference checks for the analytic gradients in this package."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .loss import LossConfig, active_mask, boundary_bce, smoothness_loss
from .sbdm import _forward, init_sbdm, sbdm_backward

REL_TOL = 1e-3
ABS_TOL = 1e-4
MIN_REL_FRACTION = 0.95
# denominator floor for the single summary number printed per check, so that
# components with near-zero gradients do not dominate it
REL_FLOOR = 1e-2


@dataclass
class CheckResult:
    name: str
    max_rel: float
    max_abs: float
    rel_fraction: float
    max_abs_outside_rel: float
    n: int
    skipped: int = 0    # components whose +-h stencil crossed a ReLU kink
    max_rel_floored: float = 0.0

    @property
    def passed(self) -> bool:
        return self.rel_fraction >= MIN_REL_FRACTION and self.max_abs_outside_rel < ABS_TOL


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(denom > 0, diff / denom, 0.0)
    return rel, diff


def numeric_gradient(f, x: np.ndarray, h: float = 1e-3, index=None) -> np.ndarray:
    """Central differences of scalar ``f`` at float64 ``x``; only ``index`` entries if given."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    which = range(flat.size) if index is None else index
    out = np.zeros(len(which) if index is not None else flat.size)
    for j, i in enumerate(which):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def batched_numeric_gradient(f_batch, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences with one call of ``f_batch`` on all 2N perturbed copies.

    ``f_batch`` maps an array of shape ``(M,) + x.shape`` to ``M`` values.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    eye = np.eye(n).reshape((n,) + x.shape) * h
    values = f_batch(np.concatenate([x + eye, x - eye]))
    return (values[:n] - values[n:]) / (2 * h)


def summarize(name, analytic, numeric, skipped: int = 0) -> CheckResult:
    rel, diff = relative_error(analytic, numeric)
    ok_rel = rel < REL_TOL
    outside = diff[~ok_rel]
    return CheckResult(
        name=name,
        max_rel=float(rel.max(initial=0.0)),
        max_abs=float(diff.max(initial=0.0)),
        rel_fraction=float(ok_rel.mean()) if rel.size else 1.0,
        n=int(rel.size),
        max_abs_outside_rel=float(outside.max(initial=0.0)),
        skipped=skipped,
        max_rel_floored=float((diff / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)).max(initial=0.0)),
    )


def random_cam(rng, shape=(3, 8, 8)) -> np.ndarray:
    """CAM values on the 1/16 lattice.

    Dyadic values keep every finite difference either exactly zero or at
    least 1/16 in magnitude, away from the narrow curvature region of the
    Charbonnier penalty where a step of 1e-3 would itself be inaccurate.
    """
    return rng.integers(0, 17, size=shape) / 16.0


def random_boundary(rng, shape=(3, 8, 8), p: float = 0.2) -> np.ndarray:
    return (rng.random(shape) < p).astype(np.float64)


# Reference forward values written directly from the stencil definitions,
# independent of the library's difference operators, and batched over a
# leading axis so a whole finite-difference sweep is one numpy call.

def _stencil_terms(x: np.ndarray, order: int, axis: int) -> np.ndarray:
    if order == 1:
        return np.diff(x, axis=axis)
    n = x.shape[axis]
    take = lambda a, b: np.take(x, np.arange(a, n - 2 + a), axis=axis)  # noqa: E731
    return take(0, 0) - 2 * take(1, 0) + take(2, 0)


def reference_smoothness(cams: np.ndarray, guide, mask, order: int, config: LossConfig) -> np.ndarray:
    c = cams[:, mask]
    s = guide[mask][None]
    total = np.zeros(len(cams))
    for axis in (2, 3):
        gate = np.exp(-config.alpha * np.abs(_stencil_terms(s, order, axis)))
        terms = np.sqrt((_stencil_terms(c, order, axis) * gate) ** 2 + config.psi_eps)
        total += terms.sum(axis=(1, 2, 3))
        # stencils that leave the image still count as psi(0)
        n_border = c[0].size - terms[0].size
        total += n_border * np.sqrt(config.psi_eps)
    return total


def reference_bce(preds: np.ndarray, target, mask, clamp: float) -> np.ndarray:
    p = np.clip(preds[:, mask], clamp, 1 - clamp)
    t = target[mask][None]
    return -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum(axis=(1, 2, 3))


def check_smoothness(rng, order: int, config: LossConfig | None = None, h: float = 1e-3):
    config = config or LossConfig()
    cam = random_cam(rng)
    guide = random_boundary(rng)
    tags = rng.integers(0, 2, size=cam.shape[0] - 1)
    mask = active_mask(tags, cam.shape[0])
    _, grad = smoothness_loss(cam, guide, tags, order, config)
    numeric = batched_numeric_gradient(
        lambda b: reference_smoothness(b, guide, mask, order, config), cam, h)
    return grad.ravel(), numeric


def check_bce(rng, clamp: float = 1e-7, h: float = 1e-3):
    pred = rng.uniform(0.05, 0.95, size=(3, 8, 8))
    target = random_boundary(rng)
    tags = rng.integers(0, 2, size=2)
    mask = active_mask(tags, 3)
    _, grad = boundary_bce(pred, target, tags, clamp)
    numeric = batched_numeric_gradient(lambda b: reference_bce(b, target, mask, clamp), pred, h)
    return grad.ravel(), numeric


def _relu_pattern(cache) -> np.ndarray:
    parts = [a1 > 0 for _, a1, _, _ in cache["levels"].values()]
    parts += [cache["z1"] > 0, cache["z2"] > 0]
    return np.concatenate([p.ravel() for p in parts])


def check_sbdm(rng, size: int = 8, num_classes: int = 3, samples_per_group: int = 1, h: float = 1e-3):
    """Sampled parameter gradients of the boundary loss through the whole module.

    A central difference is meaningless when the +-h perturbation flips a
    ReLU on or off, so such components are dropped and counted instead.
    Returns ``(analytic, numeric, skipped)``.
    """
    in_channels = (3 + num_classes,) * 4
    params = init_sbdm(in_channels, num_classes, width=4, hidden=6,
                       seed=int(rng.integers(2**31))).astype(np.float64)
    for k in params.kernels.values():
        k.bias[...] = rng.uniform(-0.1, 0.1, k.bias.shape)
    features = [rng.uniform(-1, 1, (c, size // s, size // s)) for c, s in zip(in_channels, (1, 2, 4, 8))]
    canny_map = (rng.random((1, size, size)) < 0.2).astype(np.float64)
    target = random_boundary(rng, (num_classes, size, size))
    tags = np.ones(num_classes - 1)
    mask = active_mask(tags, num_classes)
    prob, cache = _forward(features, canny_map, params)
    _, g_prob = boundary_bce(prob, target, tags)
    grads = sbdm_backward(g_prob, prob, cache, params)
    base = _relu_pattern(cache)

    def evaluate():
        p, c = _forward(features, canny_map, params)
        return reference_bce(p[None], target, mask, 1e-7)[0], np.array_equal(_relu_pattern(c), base)

    analytic, numeric, skipped = [], [], 0
    for name, kernel in params.kernels.items():
        for attr in ("weight", "bias"):
            arr = getattr(kernel, attr).reshape(-1)
            grad = getattr(grads[name], attr).reshape(-1)
            for i in rng.choice(arr.size, size=min(samples_per_group, arr.size), replace=False):
                old = arr[i]
                arr[i] = old + h
                fp, same_p = evaluate()
                arr[i] = old - h
                fm, same_m = evaluate()
                arr[i] = old
                if not (same_p and same_m):
                    skipped += 1
                    continue
                numeric.append((fp - fm) / (2 * h))
                analytic.append(grad[i])
    return np.asarray(analytic), np.asarray(numeric), skipped


def run_suite(seed: int = 0, instances: int = 100, h: float = 1e-3) -> list[CheckResult]:
    """Check both smoothness orders, the boundary loss and the full module on seeded instances."""
    rng = np.random.default_rng(seed)
    checks = {
        "smoothness_order1": lambda: check_smoothness(rng, 1, h=h),
        "smoothness_order2": lambda: check_smoothness(rng, 2, h=h),
        "boundary_bce": lambda: check_bce(rng, h=h),
        "sbdm_chain": lambda: check_sbdm(rng, h=h),
    }
    results = []
    for name, check in checks.items():
        outs = [check() for _ in range(instances)]
        analytic = np.concatenate([o[0] for o in outs])
        numeric = np.concatenate([o[1] for o in outs])
        skipped = sum(o[2] for o in outs if len(o) > 2)
        results.append(summarize(name, analytic, numeric, skipped))
    return results
