"""Training objective: flow likelihood of reprojections, bone prior, cycle losses."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from .camera import ElevationStats, RotationDraw, batch_elevation_stats, sample_rotation
from .flow import CouplingFlow
from .geometry import (
    SkeletonSpec, apply_rotation, as_matrix, center_root, normalize_pose_torch, project,
    translate_depth,
)
from .lifter import DEPTH, LifterNet, lift
from .subspace import PcaModel, to_subspace

log = logging.getLogger(__name__)

BONE_WEIGHT = 50.0
MIN_ROTATED_DEPTH = 0.1


@dataclass(frozen=True)
class BonePrior:
    """Gaussian prior on relative bone lengths.

    With ``from_batch`` the means are re-estimated from every batch being
    scored (without gradient) and ``means`` is only a fallback record.
    """

    means: tuple[float, ...]
    sigma: float = 0.1
    from_batch: bool = False

    def tensor(self, dtype=None) -> torch.Tensor:
        return torch.tensor(self.means, dtype=dtype or torch.get_default_dtype())


def safe_sqrt(sq: torch.Tensor) -> torch.Tensor:
    """Square root that is exactly 0, with zero gradient, at 0."""
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def bone_vectors(y: torch.Tensor, skel: SkeletonSpec) -> torch.Tensor:
    m = as_matrix(y)
    parents = torch.tensor([a for a, _ in skel.bones])
    children = torch.tensor([b for _, b in skel.bones])
    return m[..., children] - m[..., parents]  # (..., 3, K)


def relative_bone_lengths(y, skel: SkeletonSpec) -> torch.Tensor:
    """Bone lengths divided by the pose's mean bone length, shape ``(..., K)``."""
    y = torch.as_tensor(y)
    v = bone_vectors(y, skel)
    lengths = safe_sqrt((v * v).sum(-2))
    mean = lengths.mean(-1, keepdim=True)
    if bool((mean.detach() < 1e-8).any()):
        raise ValueError("relative_bone_lengths: mean bone length below 1e-8")
    return lengths / mean


def bone_loss(y: torch.Tensor, prior: BonePrior, skel: SkeletonSpec) -> torch.Tensor:
    """Batch-mean Gaussian NLL of the relative bone lengths (constants kept)."""
    b = relative_bone_lengths(y, skel)
    if prior.from_batch:
        means = b.detach().reshape(-1, b.shape[-1]).mean(0)
        means = means / means.mean()
    else:
        means = prior.tensor(b.dtype)
    K = b.shape[-1]
    nll = ((b - means) ** 2).sum(-1) / (2 * prior.sigma ** 2) + K * math.log(prior.sigma * math.sqrt(2 * math.pi))
    return nll.mean()


def estimate_bone_prior(
    skel: SkeletonSpec,
    sigma: float = 0.1,
    poses=None,
    source: str = "config",
) -> BonePrior:
    """Bone-prior means from the skeleton file (``source="config"``) or from poses.

    With ``source="poses"`` (or no lengths in the skeleton) the means are the
    average relative bone lengths of ``poses`` (``(N, 3J)``). ``source="batch"``
    returns a prior that estimates its means from each scored batch.
    """
    if source not in ("config", "poses", "batch"):
        raise ValueError(f"unknown bone prior source {source!r}")
    if source == "batch":
        means = skel.relative_bone_lengths or (1.0,) * skel.num_bones
        return BonePrior(tuple(float(v) for v in means), float(sigma), from_batch=True)
    if source == "config" and skel.relative_bone_lengths is not None:
        means = np.asarray(skel.relative_bone_lengths, dtype=np.float64)
    else:
        if poses is None:
            raise ValueError("no relative bone lengths in the skeleton and no poses to estimate from")
        with torch.no_grad():
            b = relative_bone_lengths(torch.as_tensor(np.asarray(poses), dtype=torch.float64), skel)
        means = b.reshape(-1, skel.num_bones).mean(0).numpy()
    means = means / means.mean()
    return BonePrior(tuple(float(v) for v in means), float(sigma))


def per_joint_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean over joints of the Euclidean distance, per pose."""
    d = as_matrix(a) - as_matrix(b)
    return safe_sqrt((d * d).sum(-2)).mean(-1)


def per_joint_l1(x: torch.Tensor, x_ref: torch.Tensor) -> torch.Tensor:
    """Mean over joints of ``|du| + |dv|``, per pose."""
    J = x.shape[-1] // 2
    return (x - x_ref).abs().sum(-1) / J


@dataclass
class LossConfig:
    depth: float = DEPTH
    image_scale: float = 0.1
    bone_weight: float = BONE_WEIGHT
    use_nf: bool = True
    use_bone: bool = True
    use_elevation: bool = True
    use_base: bool = True
    detach_target: bool = False
    detach_correction: bool = False
    min_rotated_depth: float = MIN_ROTATED_DEPTH


@dataclass
class LossReport:
    L_NF: torch.Tensor
    L_bone: torch.Tensor
    L_3D: torch.Tensor
    L_def: torch.Tensor
    L_2D: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


@dataclass
class ForwardAux:
    stats: ElevationStats
    draw: RotationDraw
    elevation: torch.Tensor
    clamped_joints: int


def _zero(dtype) -> torch.Tensor:
    return torch.zeros((), dtype=dtype)


def reprojection_nll(x2: torch.Tensor, flow: CouplingFlow, pca: PcaModel, skel: SkeletonSpec,
                     min_scale: float, check: bool = True) -> torch.Tensor:
    """Per-sample flow NLL of reprojected poses, re-normalized to unit root->head.

    The root->head length is floored at ``min_scale`` so a segment pointing
    into the camera cannot blow the normalization up.
    """
    J = skel.num_joints
    p = x2.reshape(*x2.shape[:-1], 2, J)
    s = torch.sqrt((p[..., skel.head] ** 2).sum(-1) + 1e-12)
    s = torch.where(s > min_scale, s, torch.full_like(s, min_scale))
    xn = (p / s[..., None, None]).reshape(x2.shape)
    return -flow.log_likelihood(to_subspace(xn, pca), check=check)


def nf_term(x2: torch.Tensor, flow: CouplingFlow, pca: PcaModel, skel: SkeletonSpec, min_scale: float) -> torch.Tensor:
    return reprojection_nll(x2, flow, pca, skel, min_scale).mean()


def cycle_losses(
    x: torch.Tensor,
    y1: torch.Tensor,
    y2: torch.Tensor,
    R: torch.Tensor,
    net: LifterNet,
    skel: SkeletonSpec,
    cfg: LossConfig,
    pair: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, int]:
    """Lift the virtual view again and compare in 3D, across pairs, and in 2D.

    ``x`` is the observed (camera-scale) 2D pose, ``y1`` its root-centered
    lifting and ``y2 = R y1``. ``pair`` gives the partner index of each
    sample for the deformation term (default: the next sample, cyclically).
    Returns ``(L_3D, L_def, L_2D, clamped_joint_count)``.
    """
    x2 = project(translate_depth(y2, cfg.depth), min_depth=cfg.min_rotated_depth)
    y2_hat = center_root(lift(x2, net, cfg.depth).y, skel.root)
    target = y2.detach() if cfg.detach_target else y2
    l3d = per_joint_distance(y2_hat, target).mean()

    y1_hat = apply_rotation(R.transpose(-1, -2), y2_hat)
    n = y1.shape[0]
    if n < 2:
        log.warning("deformation loss needs at least 2 samples; returning 0")
        ldef = _zero(y1.dtype)
    else:
        if pair is None:
            pair = torch.roll(torch.arange(n), -1)
        ldef = per_joint_distance(y1_hat - y1_hat[pair], y1 - y1[pair]).mean()

    back = translate_depth(y1_hat, cfg.depth)
    clamped = int((as_matrix(back)[..., 2, :] <= cfg.min_rotated_depth).sum())
    x_back = project(back, min_depth=cfg.min_rotated_depth)
    l2d = per_joint_l1(x_back, x).mean()
    return l3d, ldef, l2d, clamped


def total_loss(
    x: torch.Tensor,
    net: LifterNet,
    flow: CouplingFlow | None,
    pca: PcaModel | None,
    prior: BonePrior,
    skel: SkeletonSpec,
    cfg: LossConfig,
    generator: torch.Generator | None = None,
    pair: torch.Tensor | None = None,
    azimuth: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
) -> tuple[LossReport, ForwardAux]:
    """Full forward pass for a batch of normalized 2D poses ``x`` ``(B, 2J)``.

    The poses are rescaled to camera scale, lifted, root-centered, rotated to
    a virtual view, pushed back to depth ``cfg.depth`` and projected; the
    projection is scored by the flow in the PCA subspace. Bone and cycle
    terms are added; disabled terms are reported as exact zeros.
    """
    dtype = x.dtype
    xc = x * cfg.image_scale
    out = lift(xc, net, cfg.depth)
    y1 = center_root(out.y, skel.root)
    stats = batch_elevation_stats(out.e)
    R, draw = sample_rotation(
        out.e, stats, generator, use_elevation=cfg.use_elevation,
        detach_correction=cfg.detach_correction, azimuth=azimuth, eps=eps,
    )
    y2 = apply_rotation(R, y1)
    rotated = translate_depth(y2, cfg.depth)
    clamped = int((as_matrix(rotated)[..., 2, :] <= cfg.min_rotated_depth).sum())

    if cfg.use_nf:
        if flow is None or pca is None:
            raise ValueError("use_nf requires a flow and a subspace model")
        x2 = project(rotated, min_depth=cfg.min_rotated_depth)
        l_nf = nf_term(x2, flow, pca, skel, min_scale=0.1 * cfg.image_scale)
    else:
        l_nf = _zero(dtype)

    l_bone = bone_loss(y1, prior, skel) if cfg.use_bone else _zero(dtype)

    if cfg.use_base:
        l3d, ldef, l2d, c2 = cycle_losses(xc, y1, y2, R, net, skel, cfg, pair)
        clamped += c2
    else:
        l3d = ldef = l2d = _zero(dtype)

    total = l_nf + cfg.bone_weight * l_bone + (l3d + ldef + l2d)
    report = LossReport(L_NF=l_nf, L_bone=l_bone, L_3D=l3d, L_def=ldef, L_2D=l2d, total=total)
    return report, ForwardAux(stats=stats, draw=draw, elevation=out.e, clamped_joints=clamped)
