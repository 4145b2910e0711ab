"""Unsupervised monocular 3D human-pose lifting from 2D keypoints.

A lifting network predicts per-joint depth offsets and the camera elevation
for a 2D pose. The lifted pose is rotated to random virtual views and its
reprojections are scored by a normalizing flow trained on the 2D poses,
together with a relative-bone-length prior and cycle-consistency terms.
"""

from .config import TrainConfig
from .data import PoseDataset, load_keypoints, save_keypoints
from .geometry import SkeletonSpec, h36m_skeleton, normalize_pose
from .metrics import EvalReport, evaluate
from .trainer import TrainResult, predict_poses, score_likelihood, train

__version__ = "0.1.0"

__all__ = [
    "EvalReport", "PoseDataset", "SkeletonSpec", "TrainConfig", "TrainResult",
    "evaluate", "h36m_skeleton", "load_keypoints", "normalize_pose", "predict_poses",
    "save_keypoints", "score_likelihood", "train",
]
