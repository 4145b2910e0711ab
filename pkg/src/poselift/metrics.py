"""Pose-error metrics: MPJPE, N-MPJPE, PA-MPJPE, PCK/AUC and CPS."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import pose_to_joints, procrustes_align

AUC_THRESHOLDS = np.arange(0.0, 150.0 + 1e-9, 5.0)
CPS_THRESHOLDS = np.arange(0.0, 300.0 + 1e-9, 1.0)


def _joints(p) -> np.ndarray:
    """Accept flat ``(..., 3J)`` poses or ``(..., J, 3)`` joint arrays; return ``(N, J, 3)``."""
    a = np.asarray(p, dtype=np.float64)
    if a.shape[-1] != 3 or a.ndim == 1:
        a = pose_to_joints(a)
    return a.reshape(-1, *a.shape[-2:])


def optimal_scale(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pose ``argmin_s ||s pred - gt||``, i.e. ``<pred, gt> / <pred, pred>``."""
    num = (pred * gt).sum(axis=(1, 2))
    den = (pred * pred).sum(axis=(1, 2))
    if np.any(den == 0):
        raise ValueError("zero-norm prediction")
    return num / den


def joint_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe_family(pred, gt) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pose MPJPE, N-MPJPE and PA-MPJPE for root-centered poses."""
    p, g = _joints(pred), _joints(gt)
    raw = joint_errors(p, g).mean(axis=1)
    s = optimal_scale(p, g)
    scaled = joint_errors(s[:, None, None] * p, g).mean(axis=1)
    pa = joint_errors(procrustes_align(p, g), g).mean(axis=1)
    return raw, scaled, pa


def pck_auc(pred, gt, threshold: float = 150.0, thresholds=AUC_THRESHOLDS, scale_normalize: bool = False):
    """Percentage of joints within ``threshold`` and the mean PCK over ``thresholds``.

    Predictions are expected to be scale-normalized already (N-PCK); pass
    ``scale_normalize=True`` to apply the per-pose optimal scale here. Both
    values are percentages.
    """
    p, g = _joints(pred), _joints(gt)
    if scale_normalize:
        p = optimal_scale(p, g)[:, None, None] * p
    err = joint_errors(p, g)
    pck = 100.0 * float((err <= threshold).mean())
    auc = 100.0 * float(np.mean([(err <= t).mean() for t in thresholds]))
    return pck, auc


def cps(pred, gt, thresholds=CPS_THRESHOLDS, align: bool = True) -> float:
    """Correct Poses Score: area (mm) under the fraction of poses whose worst
    joint error is below each threshold, integrated in 1 mm steps over 0..300."""
    p, g = _joints(pred), _joints(gt)
    if align:
        p = procrustes_align(p, g)
    worst = joint_errors(p, g).max(axis=1)
    frac = np.array([(worst < t).mean() for t in thresholds[1:]])
    steps = np.diff(thresholds)
    return float((frac * steps).sum())


@dataclass
class EvalReport:
    mpjpe: np.ndarray
    n_mpjpe: np.ndarray
    pa_mpjpe: np.ndarray
    pck: float
    auc: float
    cps: float

    @property
    def count(self) -> int:
        return len(self.mpjpe)

    def summary(self) -> dict[str, float]:
        return {
            "poses": self.count,
            "MPJPE": float(self.mpjpe.mean()),
            "N-MPJPE": float(self.n_mpjpe.mean()),
            "PA-MPJPE": float(self.pa_mpjpe.mean()),
            "PCK": self.pck,
            "AUC": self.auc,
            "CPS": self.cps,
        }

    def format(self) -> str:
        s = self.summary()
        return (
            f"poses {s['poses']}  MPJPE {s['MPJPE']:.1f}  N-MPJPE {s['N-MPJPE']:.1f}  "
            f"PA-MPJPE {s['PA-MPJPE']:.1f}  N-PCK {s['PCK']:.1f}  AUC {s['AUC']:.1f}  CPS {s['CPS']:.1f}"
        )

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pose", "MPJPE", "N-MPJPE", "PA-MPJPE"])
            for i, row in enumerate(zip(self.mpjpe, self.n_mpjpe, self.pa_mpjpe)):
                w.writerow([i, *(repr(float(v)) for v in row)])
            for k, v in self.summary().items():
                w.writerow([f"#{k}", repr(float(v))])


def evaluate(pred, gt, root: int = 0) -> EvalReport:
    """Root-center both pose sets and compute every metric."""
    p, g = _joints(pred), _joints(gt)
    p = p - p[:, root: root + 1]
    g = g - g[:, root: root + 1]
    raw, scaled, pa = mpjpe_family(p, g)
    pck, auc = pck_auc(p, g, scale_normalize=True)
    return EvalReport(raw, scaled, pa, pck, auc, cps(p, g))
