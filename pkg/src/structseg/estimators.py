"""scikit-learn style wrappers around the pipeline stages.

Samples are per-image tuples rather than rows of a matrix, so ``X`` is
always a sequence. Hyperparameters live in ``__init__`` and are exposed
through ``get_params``/``set_params``; fitted state ends in an underscore.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .edge import CannyConfig, canny, label_to_boundary
from .loss import LossConfig
from .refine import (
    RefineConfig,
    build_color_affinity,
    cam_to_pseudo_label,
    random_walk_refine,
    refine_cam_by_smoothness,
)
from .sbdm import TrainConfig, evaluate_sbdm, init_sbdm, sbdm_forward, train_sbdm
from .validation import check_image, check_labels, check_stack, check_tags, check_unit_range


class CannyEdges(BaseEstimator, TransformerMixin):
    """Stateless transformer: color or gray images -> (1, H, W) edge maps."""

    def __init__(self, sigma=1.4, low_threshold=0.1, high_threshold=0.3):
        self.sigma = sigma
        self.low_threshold = low_threshold
        self.high_threshold = high_threshold

    def fit(self, X, y=None):
        self.config_ = CannyConfig(self.sigma, self.low_threshold, self.high_threshold)
        return self

    def transform(self, X):
        config = getattr(self, "config_", None) or CannyConfig(self.sigma, self.low_threshold,
                                                                self.high_threshold)
        return [canny(check_image(img), config) for img in X]


class LabelBoundaries(BaseEstimator, TransformerMixin):
    """Label maps -> per-class boundary stacks (the supervision S)."""

    def __init__(self, num_classes=4, thickness=1):
        self.num_classes = num_classes
        self.thickness = thickness

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [label_to_boundary(check_labels(m, self.num_classes), self.num_classes, self.thickness)
                for m in X]


class SmoothnessRefiner(BaseEstimator, TransformerMixin):
    """Boundary-guided CAM smoothing; ``X`` holds ``(cam, guide, tags)`` triples."""

    def __init__(self, lambda2=1.0, lambda_s=10.0, alpha=10.0, fidelity_mu=1.0,
                 steps=100, guide_mode="gradient", solver="mm"):
        self.lambda2 = lambda2
        self.lambda_s = lambda_s
        self.alpha = alpha
        self.fidelity_mu = fidelity_mu
        self.steps = steps
        self.guide_mode = guide_mode
        self.solver = solver

    def _configs(self):
        loss = LossConfig(alpha=self.alpha, lambda_s=self.lambda_s, lambda2=self.lambda2,
                          guide_mode=self.guide_mode)
        return RefineConfig(steps=self.steps, fidelity_mu=self.fidelity_mu, solver=self.solver), loss

    def fit(self, X=None, y=None):
        # nothing is learned; building the configs validates the hyperparameters
        self.refine_config_, self.loss_config_ = self._configs()
        return self

    def transform(self, X):
        refine_config, loss_config = self._configs()
        out = []
        for cam, guide, tags in X:
            cam = check_stack(cam, "cam")
            guide = check_unit_range(guide, "guide")
            out.append(refine_cam_by_smoothness(cam, guide, check_tags(tags, cam.shape[0]),
                                                refine_config, loss_config))
        return out


class RandomWalkRefiner(BaseEstimator, TransformerMixin):
    """Color-affinity random walk; ``X`` holds ``(cam, image)`` pairs."""

    def __init__(self, beta=8.0, iters=16, radius=4, sigma=0.1, conserve_mass=False):
        self.beta = beta
        self.iters = iters
        self.radius = radius
        self.sigma = sigma
        self.conserve_mass = conserve_mass

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        config = RefineConfig(rw_beta=self.beta, rw_iters=self.iters, affinity_radius=self.radius,
                              affinity_sigma=self.sigma)
        return [random_walk_refine(check_stack(cam, "cam"), build_color_affinity(check_image(img), config),
                                   config, self.conserve_mass)
                for cam, img in X]


class PseudoLabeler(BaseEstimator):
    """Argmax pseudo labels; ``X`` holds ``(cam, tags)`` pairs."""

    def __init__(self, bg_threshold=0.25):
        self.bg_threshold = bg_threshold

    def fit(self, X=None, y=None):
        return self

    def predict(self, X):
        return [cam_to_pseudo_label(check_stack(cam, "cam"), tags, self.bg_threshold) for cam, tags in X]


class BoundaryDetector(BaseEstimator):
    """Trainable boundary module.

    ``X`` holds ``(features, canny_map, tags)`` per image and ``y`` the
    target boundary stacks. ``predict_proba`` returns boundary probabilities,
    ``predict`` thresholds them at ``threshold`` and ``score`` is the pooled
    boundary F1 at tolerance 2.
    """

    def __init__(self, levels=None, width=32, hidden=64, use_canny=True, max_itr=200,
                 l_init=0.01, gamma=0.9, momentum=0.9, clip_norm=3.0, lambda1=0.05,
                 threshold=0.5, seed=0):
        self.levels = levels
        self.width = width
        self.hidden = hidden
        self.use_canny = use_canny
        self.max_itr = max_itr
        self.l_init = l_init
        self.gamma = gamma
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.lambda1 = lambda1
        self.threshold = threshold
        self.seed = seed

    def _batches(self, X, y):
        if len(X) != len(y):
            raise ValueError(f"{len(X)} samples but {len(y)} targets")
        batches = []
        for (features, canny_map, tags), target in zip(X, y):
            target = check_unit_range(target, "target")
            features = [check_stack(f, "feature level") for f in features]
            batches.append((features, check_unit_range(canny_map, "canny map"), target,
                            check_tags(tags, target.shape[0])))
        return batches

    def fit(self, X, y):
        batches = self._batches(X, y)
        if not batches:
            raise ValueError("cannot fit on zero samples")
        features, _, target, _ = batches[0]
        params = init_sbdm([f.shape[0] for f in features], target.shape[0], levels=self.levels,
                           width=self.width, hidden=self.hidden, use_canny=self.use_canny, seed=self.seed)
        config = TrainConfig(self.l_init, self.gamma, self.max_itr, self.momentum, self.seed, self.clip_norm)
        self.params_, self.loss_curve_ = train_sbdm(params, batches, config, LossConfig(lambda1=self.lambda1))
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def predict_proba(self, X):
        self._check_fitted()
        return [sbdm_forward([check_stack(f, "feature level") for f in features],
                             check_unit_range(canny_map, "canny map"), self.params_)
                for features, canny_map, _ in X]

    def predict(self, X):
        return [(p >= self.threshold).astype(np.float32) for p in self.predict_proba(X)]

    def score(self, X, y):
        self._check_fitted()
        return evaluate_sbdm(self.params_, self._batches(X, y), threshold=self.threshold)[1]
