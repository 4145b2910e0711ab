"""Flow pretraining, lifter training, inference and likelihood scoring."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .camera import SIGMA_FLOOR, ElevationStats, sample_rotation
from .checkpoint import Checkpoint, f32_exact
from .config import TrainConfig
from .data import PoseDataset
from .flow import CouplingFlow, FlowHistory, pretrain_flow
from .geometry import apply_rotation, center_root, project, translate_depth
from .lifter import LifterNet, lift
from .numerics import AdamConfig, NonFiniteGradient, adam_step, make_adam, precision
from .objective import BonePrior, estimate_bone_prior, reprojection_nll, total_loss
from .subspace import PcaModel, coordinate_subspace, fit_pca, to_subspace

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr", "L_NF", "L_bone", "L_3D", "L_def", "L_2D", "total")

# offsets separating the per-run RNG streams
_SHUFFLE_STREAM = 104729
_SAMPLER_STREAM = 7919
_VAL_STREAM = 15485863


class TrainingHalted(RuntimeError):
    pass


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    log_rows: list[dict]
    val_scores: list[float]
    flow_history: FlowHistory | None = None
    clamped_joints: int = 0
    seconds: float = 0.0


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split of ``range(n)``."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def build_subspace(x_train: np.ndarray, cfg: TrainConfig, root: int) -> PcaModel:
    """PCA (or the identity subspace without PCA), rounded to float32 precision.

    Without PCA the always-zero root coordinates are dropped, since a flow
    cannot model a delta distribution.
    """
    J = x_train.shape[1] // 2
    if cfg.use_pca:
        m = fit_pca(x_train, cfg.pca_bases)
    else:
        m = coordinate_subspace(x_train, drop=[root, J + root])
    return PcaModel(f32_exact(m.mean), f32_exact(m.basis), f32_exact(m.variances), m.total_variance)


def pretrain(cfg: TrainConfig, x_train: np.ndarray, root: int, x_val: np.ndarray | None = None):
    """Fit the subspace and pretrain the flow on the subspace coefficients."""
    with precision(cfg.precision):
        pca = build_subspace(x_train, cfg, root)
        coeffs = to_subspace(x_train, pca)
        val = None if x_val is None or len(x_val) == 0 else to_subspace(x_val, pca)
        flow, hist = pretrain_flow(coeffs, cfg.flow_config(), val_coeffs=val)
    return pca, flow, hist


def _make_lifter(cfg: TrainConfig, num_joints: int) -> LifterNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return LifterNet(num_joints, cfg.lifter_width, cfg.lifter_blocks, input_scale=1.0 / cfg.image_scale)


def predict_elevations(net: LifterNet, x: np.ndarray, cfg: TrainConfig, chunk: int = 4096) -> np.ndarray:
    dtype = torch.get_default_dtype()
    out = []
    with torch.no_grad():
        for s in range(0, len(x), chunk):
            xb = torch.as_tensor(x[s: s + chunk], dtype=dtype) * cfg.image_scale
            out.append(net(xb)[1].double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def elevation_distribution(e: np.ndarray) -> tuple[float, float]:
    mu = float(np.mean(e))
    sigma = float(np.std(e, ddof=1)) if len(e) > 1 else 0.0
    return mu, max(sigma, SIGMA_FLOOR)


def _validation_score(net, flow, pca, prior, skel, cfg: TrainConfig, x_val: torch.Tensor) -> float:
    if len(x_val) < 2:
        return float("nan")
    lc = cfg.loss_config()
    lc.use_base = False
    g = torch.Generator().manual_seed(cfg.seed + _VAL_STREAM)
    with torch.no_grad():
        rep, _ = total_loss(x_val, net, flow, pca, prior, skel, lc, generator=g)
    return float(rep.L_NF + cfg.bone_weight * rep.L_bone)


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["step"], r["epoch"]] + [repr(float(r[k])) for k in LOG_COLUMNS[2:]])


def train(
    cfg: TrainConfig,
    dataset: PoseDataset,
    out_dir: str | Path | None = None,
    pretrained: tuple[PcaModel, CouplingFlow] | None = None,
) -> TrainResult:
    """Train the lifter on the 2D poses of ``dataset`` (3D is never touched).

    The flow is pretrained first unless ``pretrained`` supplies a subspace
    and flow. Writes ``metrics.csv``, ``best.ckpt`` and ``final.ckpt`` to
    ``out_dir`` when given.
    """
    t0 = time.time()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    skel = dataset.skeleton
    with precision(cfg.precision) as dtype:
        x_all, _ = dataset.normalized(dataset_scale=cfg.dataset_scale)
        tr_idx, va_idx = split_indices(len(x_all), cfg.val_fraction, cfg.seed)
        x_train, x_val = x_all[tr_idx], x_all[va_idx]

        hist = None
        if pretrained is None:
            log.info("pretraining flow on %d poses", len(x_train))
            pca, flow, hist = pretrain(cfg, x_train, skel.root, x_val)
        else:
            pca, flow = pretrained
        for p in flow.parameters():
            p.requires_grad_(cfg.unfreeze_flow)

        prior = estimate_bone_prior(skel, cfg.sigma_b, source=cfg.bone_source)
        net = _make_lifter(cfg, skel.num_joints)
        params = list(net.named_parameters())
        if cfg.unfreeze_flow:
            params += [("flow." + k, p) for k, p in flow.named_parameters()]
        opt = make_adam((p for _, p in params), AdamConfig(
            lr=cfg.lr, weight_decay=cfg.weight_decay, decoupled_weight_decay=cfg.decoupled_weight_decay))
        lc = cfg.loss_config()
        shuffle_g = torch.Generator().manual_seed(cfg.seed + _SHUFFLE_STREAM)
        sampler_g = torch.Generator().manual_seed(cfg.seed + _SAMPLER_STREAM)

        xt = torch.as_tensor(x_train, dtype=dtype)
        xv = torch.as_tensor(x_val, dtype=dtype)
        n = len(xt)
        bs = min(cfg.batch_size, n)
        if bs < 2:
            raise ValueError("training needs at least 2 poses per batch")

        rows: list[dict] = []
        val_scores: list[float] = []
        best_score, best_state = math.inf, None
        clamped = 0
        step = 0

        def snapshot(state_net, mu, sigma, extra):
            return Checkpoint(
                config=cfg, skeleton=skel,
                lifter_state={k: v.detach().clone() for k, v in state_net.state_dict().items()},
                flow_state={k: v.detach().clone() for k, v in flow.state_dict().items()},
                pca=pca, bone_prior=prior, elevation_mu=mu, elevation_sigma=sigma,
                rng={"shuffle": shuffle_g.get_state(), "sampler": sampler_g.get_state()},
                extra=extra,
            )

        for epoch in range(cfg.epochs):
            lr = cfg.lifter_lr(epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            net.train()
            order = torch.randperm(n, generator=shuffle_g)
            for start in range(0, n - bs + 1, bs):
                idx = order[start: start + bs]
                opt.zero_grad(set_to_none=True)
                rep, aux = total_loss(xt[idx], net, flow, pca, prior, skel, lc, generator=sampler_g)
                clamped += aux.clamped_joints
                try:
                    if not torch.isfinite(rep.total):
                        raise FloatingPointError(f"non-finite loss at step {step}")
                    rep.total.backward()
                    adam_step(opt, params)
                except (FloatingPointError, NonFiniteGradient) as exc:
                    _dump_halt(out, idx, snapshot(net, 0.0, SIGMA_FLOOR, {"halted_step": step}))
                    raise TrainingHalted(str(exc)) from exc
                row = {"step": step, "epoch": epoch, "lr": lr, **rep.floats()}
                rows.append(row)
                step += 1
            net.eval()
            score = _validation_score(net, flow, pca, prior, skel, cfg, xv)
            val_scores.append(score)
            last = rows[-1] if rows else {}
            log.info("epoch %d lr %.3g total %.4f L_NF %.4f L_bone %.4f val %.4f",
                     epoch, lr, last.get("total", float("nan")), last.get("L_NF", float("nan")),
                     last.get("L_bone", float("nan")), score)
            if math.isnan(score) or score < best_score or best_state is None:
                best_score = score if not math.isnan(score) else best_score
                best_state = (copy.deepcopy(net.state_dict()), epoch)

        mu, sigma = elevation_distribution(predict_elevations(net, x_train, cfg))
        final = snapshot(net, mu, sigma, {"epoch": cfg.epochs, "kind": "final"})
        best_net = _make_lifter(cfg, skel.num_joints)
        best_net.load_state_dict(best_state[0] if best_state else net.state_dict())
        bmu, bsigma = elevation_distribution(predict_elevations(best_net, x_train, cfg))
        best = snapshot(best_net, bmu, bsigma, {"epoch": best_state[1] if best_state else cfg.epochs,
                                                 "kind": "best", "val_score": best_score})
    if clamped:
        log.info("%d joint(s) clamped to minimum depth during training", clamped)
    if out is not None:
        write_metrics_csv(rows, out / "metrics.csv")
        final.save(out / "final.ckpt")
        best.save(out / "best.ckpt")
    return TrainResult(final, best, rows, val_scores, hist, clamped, time.time() - t0)


def _flat_lift(x: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Constant-depth liftings (camera frame)."""
    J = x.shape[1] // 2
    uv = x.reshape(-1, 2, J) * cfg.image_scale * cfg.depth
    return np.concatenate([uv, np.full((len(x), 1, J), cfg.depth)], axis=1).reshape(len(x), -1)


def _dump_halt(out: Path | None, idx: torch.Tensor, ckpt: Checkpoint) -> None:
    if out is None:
        return
    (out / "halt_batch.json").write_text(json.dumps({"indices": idx.tolist()}))
    ckpt.save(out / "halt.ckpt")


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict_poses(ckpt: Checkpoint, x: np.ndarray, net: LifterNet | None = None, chunk: int = 4096) -> np.ndarray:
    """Root-centered camera-frame 3D poses ``(N, 3J)`` for normalized 2D poses."""
    cfg = ckpt.config
    net = net or ckpt.build_lifter()
    out = []
    with precision(cfg.precision) as dtype, torch.no_grad():
        for s in range(0, len(x), chunk):
            xb = torch.as_tensor(x[s: s + chunk], dtype=dtype) * cfg.image_scale
            y = lift(xb, net, cfg.depth).y
            out.append(center_root(y, ckpt.skeleton.root).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 3 * ckpt.skeleton.num_joints))


def flat_poses(x: np.ndarray, cfg: TrainConfig, root: int = 0) -> np.ndarray:
    """Zero-offset baseline: every joint unprojected at depth ``cfg.depth``."""
    y = _flat_lift(x, cfg)
    J = x.shape[1] // 2
    m = y.reshape(-1, 3, J)
    return (m - m[:, :, root: root + 1]).reshape(len(x), -1)


def score_likelihood(
    ckpt: Checkpoint,
    x: np.ndarray,
    n_rotations: int = 100,
    seed: int = 0,
    net: LifterNet | None = None,
    flow: CouplingFlow | None = None,
    chunk: int = 1024,
) -> np.ndarray:
    """Mean flow NLL of ``n_rotations`` random reprojections of each lifted pose.

    Rotations are drawn from the elevation distribution stored in the
    checkpoint (uniform prior when the checkpoint was trained without the
    elevation branch).
    """
    cfg = ckpt.config
    skel = ckpt.skeleton
    net = net or ckpt.build_lifter()
    flow = flow or ckpt.build_flow()
    g = torch.Generator().manual_seed(seed)
    out = []
    with precision(cfg.precision) as dtype, torch.no_grad():
        stats = ElevationStats(torch.tensor(ckpt.elevation_mu, dtype=dtype),
                               torch.tensor(ckpt.elevation_sigma, dtype=dtype), 0)
        for s in range(0, len(x), chunk):
            xb = torch.as_tensor(x[s: s + chunk], dtype=dtype) * cfg.image_scale
            lifted = lift(xb, net, cfg.depth)
            y1 = center_root(lifted.y, skel.root)
            acc = torch.zeros(len(xb), dtype=dtype)
            for _ in range(n_rotations):
                R, _ = sample_rotation(lifted.e, stats, g, use_elevation=cfg.use_elevation)
                x2 = project(translate_depth(apply_rotation(R, y1), cfg.depth), min_depth=0.1)
                acc += reprojection_nll(x2, flow, ckpt.pca, skel, 0.1 * cfg.image_scale, check=False)
            out.append((acc / n_rotations).double().numpy())
    return np.concatenate(out)
