"""Occlusion-aware stereo ego-motion tracking.

Hierarchical occlusion masking and object motion-state classification feed
a two-round motion-only pose solver. A synthetic stereo scene generator and
evaluation tools come with it.
"""

from .evaluation import Trajectory, evaluate, roc_auc
from .experiment import Variant, run_experiment
from .geometry import CameraIntrinsics, Pose
from .masking import MaskTier, OcclusionMask, hierarchical_mask
from .motion_state import ClassifierParams, MotionLabel, MotionState
from .sim import SimConfig, generate, scenario_config
from .tracking import Tracker, TrackingConfig, TrackingStatus

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "ClassifierParams",
    "MaskTier",
    "MotionLabel",
    "MotionState",
    "OcclusionMask",
    "Pose",
    "SimConfig",
    "Tracker",
    "TrackingConfig",
    "TrackingStatus",
    "Trajectory",
    "Variant",
    "evaluate",
    "generate",
    "hierarchical_mask",
    "roc_auc",
    "run_experiment",
    "scenario_config",
]
