"""Synthetic articulated poses seen by randomly placed cameras.

Bodies are posed by forward kinematics over the 17-joint skeleton with a
fixed bone-length template, so every generated pose satisfies the template
exactly. Joint angles are drawn around one of a few activity templates.
Cameras keep zero roll, take a uniform azimuth and a Gaussian elevation, and
sit ``depth`` root->head lengths away from the pelvis.

Body frame: +x is the subject's left, +y points down, +z points backwards,
so an unrotated subject faces a camera looking down +z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import PoseDataset
from .geometry import H36M_BONE_MM, SkeletonSpec, h36m_skeleton

ELEVATION_MU = 0.12
ELEVATION_SIGMA = 0.05


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


# (center, half-range) in radians. Limb angles are given for the left side;
# "lead" is the side that gets the asymmetric arm/leg entries.
TEMPLATES: dict[str, dict[str, tuple[float, float]]] = {
    "stand": dict(
        torso_pitch=(0.05, 0.15), torso_roll=(0.0, 0.1), torso_yaw=(0.0, 0.25),
        neck_pitch=(0.0, 0.3), neck_yaw=(0.0, 0.5),
        hip_flex=(0.05, 0.2), hip_abd=(0.1, 0.1), knee=(0.15, 0.15),
        sh_flex=(0.2, 0.5), sh_abd=(0.25, 0.25), elbow=(0.5, 0.5),
        lead_sh_flex=(0.2, 0.5), lead_elbow=(0.5, 0.5),
    ),
    "walk": dict(
        torso_pitch=(0.1, 0.1), torso_roll=(0.0, 0.08), torso_yaw=(0.0, 0.2),
        neck_pitch=(0.0, 0.2), neck_yaw=(0.0, 0.3),
        hip_flex=(0.45, 0.2), hip_abd=(0.05, 0.05), knee=(0.25, 0.25),
        sh_flex=(-0.3, 0.2), sh_abd=(0.1, 0.1), elbow=(0.4, 0.3),
        lead_hip_flex=(-0.35, 0.2), lead_knee=(0.7, 0.4),
        lead_sh_flex=(0.4, 0.2), lead_elbow=(0.6, 0.3),
    ),
    "sit": dict(
        torso_pitch=(0.15, 0.25), torso_roll=(0.0, 0.1), torso_yaw=(0.0, 0.3),
        neck_pitch=(0.1, 0.3), neck_yaw=(0.0, 0.5),
        hip_flex=(1.45, 0.25), hip_abd=(0.2, 0.15), knee=(1.5, 0.3),
        sh_flex=(0.5, 0.4), sh_abd=(0.15, 0.15), elbow=(1.0, 0.6),
        lead_sh_flex=(0.6, 0.6), lead_elbow=(1.0, 0.6),
    ),
    "reach": dict(
        torso_pitch=(0.1, 0.2), torso_roll=(0.0, 0.15), torso_yaw=(0.0, 0.3),
        neck_pitch=(-0.1, 0.3), neck_yaw=(0.0, 0.5),
        hip_flex=(0.05, 0.15), hip_abd=(0.1, 0.1), knee=(0.1, 0.1),
        sh_flex=(0.1, 0.3), sh_abd=(0.2, 0.2), elbow=(0.4, 0.4),
        lead_sh_flex=(2.0, 0.6), lead_sh_abd=(0.5, 0.5), lead_elbow=(0.4, 0.4),
    ),
    "crouch": dict(
        torso_pitch=(0.4, 0.2), torso_roll=(0.0, 0.15), torso_yaw=(0.0, 0.3),
        neck_pitch=(-0.3, 0.3), neck_yaw=(0.0, 0.4),
        hip_flex=(0.9, 0.4), hip_abd=(0.15, 0.15), knee=(1.1, 0.5),
        sh_flex=(0.7, 0.4), sh_abd=(0.15, 0.15), elbow=(0.5, 0.5),
        lead_sh_flex=(0.9, 0.5), lead_elbow=(0.5, 0.5),
    ),
}


@dataclass
class SynthConfig:
    n_samples: int = 20000
    elevation_mu: float = ELEVATION_MU
    elevation_sigma: float = ELEVATION_SIGMA
    depth: float = 10.0          # camera distance in template root->head lengths
    focal: float = 1000.0
    center: tuple[float, float] = (500.0, 500.0)
    noise_px: float = 0.0
    bone_mm: tuple[float, ...] = H36M_BONE_MM
    templates: tuple[str, ...] = tuple(TEMPLATES)
    skeleton: SkeletonSpec = field(default_factory=h36m_skeleton)


@dataclass
class CameraTruth:
    elevation: np.ndarray
    azimuth: np.ndarray
    mu: float
    sigma: float
    distance_mm: float


def _sample_angles(tpl: dict, rng: np.random.Generator) -> dict[str, float]:
    out = {}
    for k, (c, r) in tpl.items():
        out[k] = c + r * (2 * rng.random() - 1)
    return out


def articulate(angles: dict[str, float], bone_mm=H36M_BONE_MM, lead_left: bool = True) -> np.ndarray:
    """Forward kinematics of the 17-joint skeleton; returns ``(17, 3)`` mm, pelvis at origin."""
    L = dict(zip(
        ("r_hip", "r_thigh", "r_shin", "l_hip", "l_thigh", "l_shin", "spine", "thorax", "neck", "head",
         "l_sh", "l_upper", "l_fore", "r_sh", "r_upper", "r_fore"), bone_mm))
    P = np.zeros((17, 3))
    down = np.array([0.0, 1.0, 0.0])
    up = -down

    def get(key, lead):
        lk = "lead_" + key
        return angles[lk] if lead and lk in angles else angles[key]

    # legs
    for side, hip, knee, ankle, sgn in (("l", 4, 5, 6, 1.0), ("r", 1, 2, 3, -1.0)):
        lead = (side == "l") == lead_left
        P[hip] = np.array([sgn * L[f"{side}_hip"], 0.0, 0.0])
        Rt = _rx(-get("hip_flex", lead)) @ _rz(-sgn * get("hip_abd", lead))
        P[knee] = P[hip] + Rt @ down * L[f"{side}_thigh"]
        Rs = Rt @ _rx(get("knee", lead))
        P[ankle] = P[knee] + Rs @ down * L[f"{side}_shin"]

    # torso and head
    Rtor = _ry(angles["torso_yaw"]) @ _rx(angles["torso_pitch"]) @ _rz(angles["torso_roll"])
    P[7] = Rtor @ up * L["spine"]
    Rtor2 = Rtor @ _rx(0.5 * angles["torso_pitch"])
    P[8] = P[7] + Rtor2 @ up * L["thorax"]
    Rh = Rtor2 @ _ry(angles["neck_yaw"]) @ _rx(angles["neck_pitch"])
    nose_dir = np.array([0.0, -0.9, -0.44])
    P[9] = P[8] + Rh @ (nose_dir / np.linalg.norm(nose_dir)) * L["neck"]
    P[10] = P[9] + Rh @ up * L["head"]

    # arms
    for side, sh, el, wr, sgn in (("l", 11, 12, 13, 1.0), ("r", 14, 15, 16, -1.0)):
        lead = (side == "l") == lead_left
        P[sh] = P[8] + Rtor2 @ np.array([sgn * L[f"{side}_sh"], 0.0, 0.0])
        Ru = Rtor2 @ _rx(-get("sh_flex", lead)) @ _rz(-sgn * get("sh_abd", lead))
        P[el] = P[sh] + Ru @ down * L[f"{side}_upper"]
        Rf = Ru @ _rx(-get("elbow", lead))
        P[wr] = P[el] + Rf @ down * L[f"{side}_fore"]
    return P


def template_root_head_mm(bone_mm=H36M_BONE_MM) -> float:
    rest = {k: (0.0, 0.0) for k in TEMPLATES["stand"]}
    P = articulate({k: 0.0 for k in rest}, bone_mm)
    return float(np.linalg.norm(P[10] - P[0]))


def generate_synthetic(cfg: SynthConfig, rng: np.random.Generator) -> tuple[PoseDataset, CameraTruth]:
    """Sample posed bodies and cameras; return pixel 2D, camera-frame 3D (mm) and camera truth."""
    if cfg.skeleton.num_joints != 17:
        raise ValueError("the articulation model covers the 17-joint skeleton only")
    n = cfg.n_samples
    names = list(cfg.templates)
    dist = cfg.depth * template_root_head_mm(cfg.bone_mm)
    elev = rng.normal(cfg.elevation_mu, cfg.elevation_sigma, size=n)
    azim = rng.uniform(-np.pi, np.pi, size=n)
    P3 = np.empty((n, 3, 17))
    for i in range(n):
        tpl = TEMPLATES[names[rng.integers(len(names))]]
        angles = _sample_angles(tpl, rng)
        body = articulate(angles, cfg.bone_mm, lead_left=bool(rng.random() < 0.5))
        R = _rx(elev[i]) @ _ry(azim[i])
        P3[i] = R @ body.T + np.array([[0.0], [0.0], [dist]])
    uv = cfg.focal * P3[:, :2] / P3[:, 2:3]
    uv[:, 0] += cfg.center[0]
    uv[:, 1] += cfg.center[1]
    if cfg.noise_px > 0:
        uv = uv + rng.normal(0.0, cfg.noise_px, size=uv.shape)
    ds = PoseDataset(
        pose2d=uv.reshape(n, -1), skeleton=cfg.skeleton, pose3d=P3.reshape(n, -1),
        meta={"source": "synthetic", "stride": 1},
    )
    return ds, CameraTruth(elev, azim, cfg.elevation_mu, cfg.elevation_sigma, dist)
