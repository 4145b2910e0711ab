"""Skeletons, 2D normalization, pinhole projection, rotations and Procrustes.

Conventions used throughout the package:

* The camera looks down +z, x points right and y points down in the image.
* A 2D pose is a flat vector ``[u_1..u_J, v_1..v_J]``; a 3D pose is a flat
  vector ``[x_1..x_J, y_1..y_J, z_1..z_J]`` so that ``reshape(3, J)`` puts one
  joint per column. Batched poses carry leading batch dims.
* Elevation is a rotation about +x, azimuth a rotation about +y. Rotations
  left-multiply the 3xJ pose matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

# Root->head distances below this are treated as degenerate.
DEGENERATE_SCALE = 1e-4


class DegeneratePoseError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonSpec:
    joint_names: tuple[str, ...]
    root: int
    head: int
    bones: tuple[tuple[int, int], ...]
    # Relative bone lengths (mean 1) used as the bone-prior means, if known.
    relative_bone_lengths: tuple[float, ...] | None = None
    name: str = "custom"

    def __post_init__(self):
        J = len(self.joint_names)
        if not (0 <= self.root < J and 0 <= self.head < J) or self.root == self.head:
            raise ValueError(f"root={self.root} / head={self.head} invalid for {J} joints")
        if len(self.bones) != J - 1:
            raise ValueError(f"a tree over {J} joints needs {J - 1} bones, got {len(self.bones)}")
        seen = {self.root}
        pending = list(self.bones)
        # bones may be listed in any order; grow the tree from the root
        while pending:
            grown = [b for b in pending if b[0] in seen and b[1] not in seen]
            if not grown:
                raise ValueError(f"bones {pending} are not connected to the tree rooted at {self.root}")
            for b in grown:
                seen.add(b[1])
                pending.remove(b)
        if self.relative_bone_lengths is not None and len(self.relative_bone_lengths) != len(self.bones):
            raise ValueError("relative_bone_lengths must have one entry per bone")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_bones(self) -> int:
        return len(self.bones)

    def to_json(self) -> dict:
        d = {
            "name": self.name,
            "joints": list(self.joint_names),
            "root": self.root,
            "head": self.head,
            "bones": [list(b) for b in self.bones],
        }
        if self.relative_bone_lengths is not None:
            d["relative_bone_lengths"] = list(self.relative_bone_lengths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SkeletonSpec":
        names = list(d["joints"])

        def idx(v):
            return names.index(v) if isinstance(v, str) else int(v)

        rel = d.get("relative_bone_lengths")
        return cls(
            joint_names=tuple(names),
            root=idx(d["root"]),
            head=idx(d["head"]),
            bones=tuple((idx(a), idx(b)) for a, b in d["bones"]),
            relative_bone_lengths=None if rel is None else tuple(float(r) for r in rel),
            name=d.get("name", "custom"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "SkeletonSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


H36M_JOINTS = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "nose", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
H36M_BONES = (
    (0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (5, 6),
    (0, 7), (7, 8), (8, 9), (9, 10),
    (8, 11), (11, 12), (12, 13), (8, 14), (14, 15), (15, 16),
)
# Typical adult segment lengths in mm, in H36M_BONES order.
H36M_BONE_MM = (
    132.0, 442.0, 454.0, 132.0, 442.0, 454.0,
    233.0, 257.0, 121.0, 115.0,
    151.0, 278.0, 251.0, 151.0, 278.0, 251.0,
)


def _relative(lengths) -> tuple[float, ...]:
    a = np.asarray(lengths, dtype=np.float64)
    return tuple(float(v) for v in a / a.mean())


def h36m_skeleton() -> SkeletonSpec:
    return SkeletonSpec(
        joint_names=H36M_JOINTS,
        root=0,
        head=10,
        bones=H36M_BONES,
        relative_bone_lengths=_relative(H36M_BONE_MM),
        name="h36m17",
    )


# ---------------------------------------------------------------------------
# 2D normalization
# ---------------------------------------------------------------------------

def root_head_length(x: np.ndarray, skel: SkeletonSpec) -> np.ndarray:
    J = skel.num_joints
    p = np.asarray(x, dtype=np.float64).reshape(-1, 2, J)
    return np.linalg.norm(p[:, :, skel.head] - p[:, :, skel.root], axis=1)


def normalize_pose(x_raw, skel: SkeletonSpec, scale: float | None = None) -> np.ndarray:
    """Root-center 2D poses and divide by their root->head length.

    ``x_raw`` is ``(2J,)`` or ``(N, 2J)``. With ``scale`` given, every pose is
    divided by that single value instead (dataset-wide normalization).
    Raises DegeneratePoseError if any root->head length is below
    ``DEGENERATE_SCALE``; use :func:`normalize_poses` to filter instead.
    """
    x = np.asarray(x_raw, dtype=np.float64)
    single = x.ndim == 1
    J = skel.num_joints
    p = x.reshape(-1, 2, J)
    p = p - p[:, :, skel.root: skel.root + 1]
    if scale is None:
        s = np.linalg.norm(p[:, :, skel.head], axis=1)
        bad = np.flatnonzero(s < DEGENERATE_SCALE)
        if bad.size:
            raise DegeneratePoseError(
                f"{bad.size} pose(s) with root->head length < {DEGENERATE_SCALE} (first index {bad[0]})"
            )
        p = p / s[:, None, None]
    else:
        p = p / scale
    out = p.reshape(-1, 2 * J)
    return out[0] if single else out


def normalize_poses(x_raw, skel: SkeletonSpec, dataset_scale: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a batch, dropping degenerate poses.

    Returns ``(normalized, kept_indices)``.
    """
    x = np.atleast_2d(np.asarray(x_raw, dtype=np.float64))
    s = root_head_length(x, skel)
    keep = np.flatnonzero(s >= DEGENERATE_SCALE)
    if dataset_scale:
        J = skel.num_joints
        p = x[keep].reshape(-1, 2, J)
        p = p - p[:, :, skel.root: skel.root + 1]
        return (p / s[keep].mean()).reshape(-1, 2 * J), keep
    return normalize_pose(x[keep], skel), keep


def normalize_pose_torch(x: torch.Tensor, skel: SkeletonSpec) -> torch.Tensor:
    """Differentiable per-pose normalization of a batch ``(..., 2J)``."""
    J = skel.num_joints
    p = x.reshape(*x.shape[:-1], 2, J)
    p = p - p[..., skel.root: skel.root + 1]
    s = torch.sqrt((p[..., skel.head] ** 2).sum(-1))
    return (p / s[..., None, None]).reshape(x.shape)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def as_matrix(y: torch.Tensor) -> torch.Tensor:
    """``(..., 3J)`` -> ``(..., 3, J)``."""
    return y.reshape(*y.shape[:-1], 3, y.shape[-1] // 3)


def as_vector(m: torch.Tensor) -> torch.Tensor:
    """``(..., 3, J)`` -> ``(..., 3J)``."""
    return m.reshape(*m.shape[:-2], -1)


def project(y: torch.Tensor, min_depth: float | None = None) -> torch.Tensor:
    """Pinhole projection ``[x/z, y/z]`` of every joint.

    Without ``min_depth``, non-positive depths raise. With it, depths are
    clamped (zero gradient in the clamped region) so training can continue.
    """
    from .numerics import clamp_min

    m = as_matrix(y)
    z = m[..., 2, :]
    if min_depth is None:
        if bool((z <= 0).any()):
            raise ValueError("project: joint at or behind the camera (z <= 0)")
    else:
        z = clamp_min(z, min_depth)
    uv = m[..., :2, :] / z[..., None, :]
    return uv.reshape(*uv.shape[:-2], -1)


def unproject(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """``y_j = [u_j w_j, v_j w_j, w_j]`` for ``x`` of shape ``(..., 2J)`` and ``w`` ``(..., J)``."""
    J = w.shape[-1]
    uv = x.reshape(*x.shape[:-1], 2, J)
    m = torch.cat([uv * w[..., None, :], w[..., None, :]], dim=-2)
    return as_vector(m)


def center_root(y: torch.Tensor, root: int) -> torch.Tensor:
    m = as_matrix(y)
    return as_vector(m - m[..., root: root + 1])


def translate_depth(y: torch.Tensor, depth: float) -> torch.Tensor:
    m = as_matrix(y)
    offset = torch.zeros(3, 1, dtype=y.dtype)
    offset[2, 0] = depth
    return as_vector(m + offset)


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def _angle(a) -> torch.Tensor:
    return a if torch.is_tensor(a) else torch.tensor(float(a), dtype=torch.get_default_dtype())


def rot_elevation(angle) -> torch.Tensor:
    """Rotation about +x; batched over the shape of ``angle``."""
    a = _angle(angle)
    c, s = torch.cos(a), torch.sin(a)
    one, zero = torch.ones_like(a), torch.zeros_like(a)
    rows = [
        torch.stack([one, zero, zero], -1),
        torch.stack([zero, c, -s], -1),
        torch.stack([zero, s, c], -1),
    ]
    return torch.stack(rows, -2)


def rot_azimuth(angle) -> torch.Tensor:
    """Rotation about +y; batched over the shape of ``angle``."""
    a = _angle(angle)
    c, s = torch.cos(a), torch.sin(a)
    one, zero = torch.ones_like(a), torch.zeros_like(a)
    rows = [
        torch.stack([c, zero, s], -1),
        torch.stack([zero, one, zero], -1),
        torch.stack([-s, zero, c], -1),
    ]
    return torch.stack(rows, -2)


def apply_rotation(R: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Rotate every joint: ``R @ [y]^{3xJ}``."""
    return as_vector(R @ as_matrix(y))


# ---------------------------------------------------------------------------
# Procrustes
# ---------------------------------------------------------------------------

def similarity_fit(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Least-squares similarity ``s R p + t`` mapping ``pred`` onto ``gt``.

    Both are ``(N, J, 3)`` joint arrays. Returns ``(s, R, t)`` with shapes
    ``(N,)``, ``(N, 3, 3)``, ``(N, 3)``.
    """
    mu_p = pred.mean(axis=1, keepdims=True)
    mu_g = gt.mean(axis=1, keepdims=True)
    P = pred - mu_p
    G = gt - mu_g
    var_p = (P ** 2).sum(axis=(1, 2))
    cov = np.einsum("nji,njk->nik", G, P)  # sum_j g_j p_j^T
    U, S, Vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(U @ Vt))
    sign[sign == 0] = 1.0
    D = np.ones_like(S)
    D[:, -1] = sign
    R = U @ (D[:, :, None] * Vt)
    s = (S * D).sum(axis=1) / var_p
    t = mu_g[:, 0] - s[:, None] * np.einsum("nik,nk->ni", R, mu_p[:, 0])
    return s, R, t


def procrustes_align(pred, gt) -> np.ndarray:
    """Align ``pred`` to ``gt`` by the optimal rotation, scale and translation.

    Accepts ``(J, 3)`` or ``(N, J, 3)`` arrays. Raises ValueError when either
    point set has rank < 2 after centering.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"procrustes_align: shapes {p.shape} and {g.shape} differ")
    single = p.ndim == 2
    if single:
        p, g = p[None], g[None]
    for name, arr in (("pred", p), ("gt", g)):
        sv = np.linalg.svd(arr - arr.mean(axis=1, keepdims=True), compute_uv=False)
        tol = 1e-9 * np.maximum(sv[:, :1], 1e-300)
        if np.any((sv > tol).sum(axis=1) < 2):
            raise ValueError(f"procrustes_align: degenerate {name} configuration (rank < 2)")
    s, R, t = similarity_fit(p, g)
    out = s[:, None, None] * np.einsum("nik,njk->nji", R, p) + t[:, None, :]
    return out[0] if single else out


def pose_to_joints(y) -> np.ndarray:
    """Flat ``(..., 3J)`` pose -> ``(..., J, 3)`` joint array."""
    a = np.asarray(y, dtype=np.float64)
    J = a.shape[-1] // 3
    return np.swapaxes(a.reshape(*a.shape[:-1], 3, J), -1, -2)


def joints_to_pose(p) -> np.ndarray:
    a = np.asarray(p, dtype=np.float64)
    return np.swapaxes(a, -1, -2).reshape(*a.shape[:-2], -1)
