"""Keypoint datasets: CSV / npz ingestion, writing, and 3D-to-2D reprojection.

CSV layout (one pose per row, header required)::

    u_<joint>... , v_<joint>... [, x_<joint>..., y_<joint>..., z_<joint>...]

``u``/``v`` are image coordinates (pixels or any consistent unit). The
optional ``x``/``y``/``z`` columns carry camera-frame 3D ground truth in mm
and are only used for evaluation. Joint names are matched to the skeleton by
name, so column order in the file is free. ``joint_map`` renames file joints
to skeleton joints for dataset adapters.

The npz layout holds ``pose2d`` ``(N, 2J)``, optional ``pose3d`` ``(N, 3J)``
and ``joints`` (names in file order, same flat layouts as above).
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import SkeletonSpec, normalize_poses

log = logging.getLogger(__name__)


class KeypointFormatError(ValueError):
    pass


@dataclass
class PoseDataset:
    pose2d: np.ndarray                     # (N, 2J) raw image coordinates
    skeleton: SkeletonSpec
    pose3d: np.ndarray | None = None       # (N, 3J) camera frame, mm
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pose2d)

    def subset(self, idx) -> "PoseDataset":
        idx = np.asarray(idx)
        return PoseDataset(
            self.pose2d[idx], self.skeleton,
            None if self.pose3d is None else self.pose3d[idx], dict(self.meta),
        )

    def normalized(self, dataset_scale: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Normalized 2D poses and the indices that survived the degeneracy check."""
        x, keep = normalize_poses(self.pose2d, self.skeleton, dataset_scale=dataset_scale)
        rejected = len(self) - len(keep)
        if rejected:
            log.warning("dropped %d degenerate pose(s) during normalization", rejected)
        self.meta["rejected"] = rejected
        return x, keep


def checksum(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()[:16]


def _column_order(header: list[str], skel: SkeletonSpec, joint_map: dict[str, str] | None, lineno: int):
    names = set(skel.joint_names)
    cols: dict[tuple[str, str], int] = {}
    for i, h in enumerate(header):
        h = h.strip()
        if "_" not in h:
            raise KeypointFormatError(f"line {lineno}: column '{h}' is not of the form <axis>_<joint>")
        axis, joint = h.split("_", 1)
        if joint_map:
            joint = joint_map.get(joint, joint)
        if axis not in ("u", "v", "x", "y", "z"):
            raise KeypointFormatError(f"line {lineno}: unknown axis '{axis}' in column '{h}'")
        if joint not in names:
            raise KeypointFormatError(f"line {lineno}: unknown joint name '{joint}'")
        cols[(axis, joint)] = i
    order2 = []
    for axis in ("u", "v"):
        for j in skel.joint_names:
            if (axis, j) not in cols:
                raise KeypointFormatError(f"line {lineno}: missing column {axis}_{j}")
            order2.append(cols[(axis, j)])
    has3d = any(a in ("x", "y", "z") for a, _ in cols)
    order3 = []
    if has3d:
        for axis in ("x", "y", "z"):
            for j in skel.joint_names:
                if (axis, j) not in cols:
                    raise KeypointFormatError(f"line {lineno}: missing column {axis}_{j}")
                order3.append(cols[(axis, j)])
    return order2, order3


def load_keypoints(
    path: str | Path,
    skel: SkeletonSpec,
    fmt: str | None = None,
    stride: int = 1,
    joint_map: dict[str, str] | None = None,
) -> PoseDataset:
    """Read a keypoint file into a PoseDataset, keeping every ``stride``-th pose."""
    path = Path(path)
    fmt = fmt or ("npz" if path.suffix == ".npz" else "csv")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if fmt == "csv":
        pose2d, pose3d = _read_csv(path, skel, joint_map)
    elif fmt == "npz":
        pose2d, pose3d = _read_npz(path, skel, joint_map)
    else:
        raise ValueError(f"unknown keypoint format '{fmt}'")
    pose2d = pose2d[::stride]
    pose3d = None if pose3d is None else pose3d[::stride]
    meta = {"source": str(path), "stride": stride, "checksum2d": checksum(pose2d)}
    if pose3d is not None:
        meta["checksum3d"] = checksum(pose3d)
    log.info("loaded %d poses from %s (stride %d, sha %s)", len(pose2d), path, stride, meta["checksum2d"])
    return PoseDataset(pose2d, skel, pose3d, meta)


def _read_csv(path: Path, skel: SkeletonSpec, joint_map):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise KeypointFormatError(f"{path}: empty file") from None
        order2, order3 = _column_order(header, skel, joint_map, 1)
        rows2, rows3 = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise KeypointFormatError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise KeypointFormatError(f"line {lineno}: {exc}") from None
            rows2.append([vals[i] for i in order2])
            if order3:
                rows3.append([vals[i] for i in order3])
    J2 = 2 * skel.num_joints
    pose2d = np.asarray(rows2, dtype=np.float64).reshape(-1, J2)
    pose3d = np.asarray(rows3, dtype=np.float64).reshape(-1, 3 * skel.num_joints) if order3 else None
    return pose2d, pose3d


def _read_npz(path: Path, skel: SkeletonSpec, joint_map):
    with np.load(path, allow_pickle=False) as z:
        names = [str(n) for n in z["joints"]] if "joints" in z else list(skel.joint_names)
        if joint_map:
            names = [joint_map.get(n, n) for n in names]
        unknown = [n for n in names if n not in skel.joint_names]
        if unknown:
            raise KeypointFormatError(f"{path}: unknown joint name '{unknown[0]}'")
        perm = [names.index(j) for j in skel.joint_names]
        F = len(names)
        p2 = np.asarray(z["pose2d"], dtype=np.float64).reshape(-1, 2, F)[:, :, perm]
        pose2d = p2.reshape(len(p2), -1)
        pose3d = None
        if "pose3d" in z:
            p3 = np.asarray(z["pose3d"], dtype=np.float64).reshape(-1, 3, F)[:, :, perm]
            pose3d = p3.reshape(len(p3), -1)
    return pose2d, pose3d


def save_keypoints(ds: PoseDataset, path: str | Path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or ("npz" if path.suffix == ".npz" else "csv")
    names = ds.skeleton.joint_names
    if fmt == "npz":
        arrays = {"pose2d": ds.pose2d, "joints": np.asarray(names)}
        if ds.pose3d is not None:
            arrays["pose3d"] = ds.pose3d
        np.savez(path, **arrays)
        return
    header = [f"{a}_{j}" for a in ("u", "v") for j in names]
    data = ds.pose2d
    if ds.pose3d is not None:
        header += [f"{a}_{j}" for a in ("x", "y", "z") for j in names]
        data = np.concatenate([ds.pose2d, ds.pose3d], axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data:
            w.writerow([repr(float(v)) for v in row])


@dataclass
class Camera:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    focal: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)


def reproject_3d_to_2d(ds: PoseDataset, camera: Camera, points_are_camera_frame: bool = False) -> PoseDataset:
    """Replace the 2D poses by pinhole projections of the 3D poses.

    The 3D poses are mapped into the camera as ``R p + t`` (skipped when
    already in the camera frame). Poses with any joint at ``z <= 0`` are
    dropped and counted in ``meta["dropped_behind_camera"]``.
    """
    if ds.pose3d is None:
        raise ValueError("reproject_3d_to_2d needs 3D poses")
    J = ds.skeleton.num_joints
    P = ds.pose3d.reshape(-1, 3, J)
    if not points_are_camera_frame:
        P = np.einsum("ik,nkj->nij", camera.R, P) + np.asarray(camera.t)[None, :, None]
    z = P[:, 2]
    ok = (z > 0).all(axis=1)
    uv = np.empty((len(P), 2, J))
    uv[ok] = camera.focal * P[ok, :2] / z[ok, None, :]
    uv[ok, 0] += camera.center[0]
    uv[ok, 1] += camera.center[1]
    meta = dict(ds.meta, dropped_behind_camera=int((~ok).sum()))
    return PoseDataset(uv[ok].reshape(-1, 2 * J), ds.skeleton, P[ok].reshape(-1, 3 * J), meta)
