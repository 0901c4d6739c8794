"""Boundary-aware refinement of class activation maps for weakly supervised segmentation.

Modules:

* ``tensor``: (C, H, W) convolutions and bilinear upsampling with backward passes
* ``edge``: Canny edges and label-map boundaries
* ``loss``: gated smoothness losses, boundary cross-entropy, the weighted objective
* ``sbdm``: the boundary detection module and its SGD trainer
* ``refine``: CAM smoothing, random-walk diffusion, pseudo labels
* ``synth``: seeded synthetic scenes and degraded CAMs
* ``eval``: mIoU, boundary F1 and image occupancy
* ``ioformats``: Netpbm, the SMT1 tensor container, heatmaps
* ``estimators``: scikit-learn style wrappers
"""

from .edge import CannyConfig, canny, label_to_boundary
from .eval import boundary_f1, evaluate, iop, miou
from .loss import LossConfig, boundary_bce, smoothness_loss, total_objective, total_smoothness
from .refine import (
    AffinityGraph,
    RefineConfig,
    build_color_affinity,
    cam_to_pseudo_label,
    random_walk_refine,
    refine_cam_by_smoothness,
)
from .sbdm import SbdmParams, TrainConfig, init_sbdm, poly_lr, sbdm_forward, sbdm_train_step, train_sbdm
from .synth import DegradeSpec, SceneSpec, degrade_to_cam, generate_scene

__version__ = "0.1.0"

__all__ = [
    "AffinityGraph",
    "CannyConfig",
    "DegradeSpec",
    "LossConfig",
    "RefineConfig",
    "SbdmParams",
    "SceneSpec",
    "TrainConfig",
    "boundary_bce",
    "boundary_f1",
    "build_color_affinity",
    "cam_to_pseudo_label",
    "canny",
    "degrade_to_cam",
    "evaluate",
    "generate_scene",
    "init_sbdm",
    "iop",
    "label_to_boundary",
    "miou",
    "poly_lr",
    "random_walk_refine",
    "refine_cam_by_smoothness",
    "sbdm_forward",
    "sbdm_train_step",
    "smoothness_loss",
    "total_objective",
    "total_smoothness",
    "train_sbdm",
]
