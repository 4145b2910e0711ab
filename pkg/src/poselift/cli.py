"""Command-line interface.

Subcommands::

    synth          write a synthetic 2D/3D dataset
    pretrain-flow  fit the subspace and pretrain the flow
    train          train the lifter (pretraining the flow unless --flow is given)
    evaluate       EvalReport CSV for a checkpoint (or a prediction file) on a 3D-labelled set
    score          per-pose likelihood CSV (plus PA-MPJPE when 3D is available)
    sweep-bases    (M, PA-MPJPE) rows over a list of PCA subspace sizes

Every command writes ``manifest.json`` into its output directory. Config
files are JSON objects whose keys are TrainConfig fields; flags override
the file. ``POSELIFT_THREADS`` sets the torch thread count.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import PoseDataset, load_keypoints, save_keypoints
from .geometry import SkeletonSpec, h36m_skeleton, normalize_pose
from .metrics import EvalReport, evaluate, mpjpe_family
from .numerics import configure_threads
from .synthetic import SynthConfig, generate_synthetic
from .trainer import predict_poses, pretrain, score_likelihood, split_indices, train

log = logging.getLogger("poselift")

MANIFEST = "manifest.json"


class CliError(Exception):
    pass


def git_blob_hash(path: str | Path) -> str:
    """Content hash in the style of ``git hash-object``."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    started: float = 0.0
    finished: float = 0.0

    def write(self, out_dir: Path) -> None:
        (out_dir / MANIFEST).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# config and data helpers
# ---------------------------------------------------------------------------

def resolve_config(args) -> tuple[TrainConfig, dict]:
    """Config file, then flags. Returns the config and non-TrainConfig keys of the file."""
    raw = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
    extras = {k: raw.pop(k) for k in list(raw) if k in ("bases",)}
    cfg = TrainConfig.from_dict(raw)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    for flag, name in (("no_pca", "use_pca"), ("no_elevation", "use_elevation"),
                       ("no_bone", "use_bone"), ("no_nf", "use_nf")):
        if getattr(args, flag, False):
            over[name] = False
    for name in ("epochs", "flow_epochs"):
        if getattr(args, name, None) is not None:
            over[name] = getattr(args, name)
    return cfg.replace(**over), extras


def load_skeleton(path: str | None) -> SkeletonSpec:
    return SkeletonSpec.load(path) if path else h36m_skeleton()


def load_data(path: str, args) -> PoseDataset:
    return load_keypoints(path, load_skeleton(getattr(args, "skeleton", None)), stride=getattr(args, "stride", 1) or 1)


def _require_3d(ds: PoseDataset, path: str) -> None:
    if ds.pose3d is None:
        raise CliError(f"{path} has no 3D ground truth")


def evaluate_checkpoint(ckpt: Checkpoint, ds: PoseDataset) -> EvalReport:
    x, keep = ds.normalized(dataset_scale=ckpt.config.dataset_scale)
    pred = predict_poses(ckpt, x)
    return evaluate(pred, ds.pose3d[keep], root=ds.skeleton.root)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, out: Path, manifest: RunManifest) -> None:
    scfg = SynthConfig(n_samples=args.n, noise_px=args.noise_px)
    ds, truth = generate_synthetic(scfg, np.random.default_rng(manifest.seed))
    save_keypoints(ds, out / f"poses.{args.format}")
    (out / "camera.json").write_text(json.dumps({
        "elevation_mu": truth.mu, "elevation_sigma": truth.sigma, "distance_mm": truth.distance_mm,
        "elevation": truth.elevation.tolist(), "azimuth": truth.azimuth.tolist(),
    }))
    manifest.config = {"n_samples": args.n, "noise_px": args.noise_px, "format": args.format}


def cmd_pretrain_flow(args, out: Path, manifest: RunManifest) -> None:
    cfg, _ = resolve_config(args)
    ds = load_data(args.data, args)
    x, _ = ds.normalized(dataset_scale=cfg.dataset_scale)
    tr, va = split_indices(len(x), cfg.val_fraction, cfg.seed)
    pca, flow, hist = pretrain(cfg, x[tr], ds.skeleton.root, x[va])
    Checkpoint(
        config=cfg, skeleton=ds.skeleton, lifter_state={},
        flow_state={k: v.detach() for k, v in flow.state_dict().items()},
        pca=pca, bone_prior=_placeholder_prior(ds.skeleton),
        extra={"kind": "flow", "train_nll": hist.train_nll, "val_nll": hist.val_nll, "lr": hist.lr},
    ).save(out / "flow.ckpt")
    manifest.config = cfg.to_dict()
    print(f"flow NLL train {hist.train_nll[-1]:.4f}" + (f"  val {hist.val_nll[-1]:.4f}" if hist.val_nll else ""))


def _placeholder_prior(skel: SkeletonSpec):
    from .objective import BonePrior
    return BonePrior(tuple(skel.relative_bone_lengths or (1.0,) * skel.num_bones))


def _pretrained(path: str | None, cfg: TrainConfig):
    if not path:
        return None
    ck = Checkpoint.load(path)
    if ck.config.use_pca != cfg.use_pca or (cfg.use_pca and ck.pca.n_components != cfg.pca_bases):
        raise CliError(f"flow checkpoint {path} was fitted with a different subspace")
    return ck.pca, ck.build_flow()


def cmd_train(args, out: Path, manifest: RunManifest) -> None:
    cfg, _ = resolve_config(args)
    ds = load_data(args.data, args)
    res = train(cfg, ds, out_dir=out, pretrained=_pretrained(args.flow, cfg))
    manifest.config = cfg.to_dict()
    last = res.log_rows[-1] if res.log_rows else {}
    print(f"trained {cfg.epochs} epochs in {res.seconds:.0f}s; final loss {last.get('total', float('nan')):.4f}; "
          f"elevation mu {res.final.elevation_mu:.4f} sigma {res.final.elevation_sigma:.4f}")


def cmd_evaluate(args, out: Path, manifest: RunManifest) -> None:
    ds = load_data(args.data, args)
    _require_3d(ds, args.data)
    if args.pred:
        pred = load_data(args.pred, args)
        _require_3d(pred, args.pred)
        if len(pred) != len(ds):
            raise CliError(f"{args.pred} has {len(pred)} poses, {args.data} has {len(ds)}")
        report = evaluate(pred.pose3d, ds.pose3d, root=ds.skeleton.root)
    else:
        ckpt = Checkpoint.load(args.ckpt)
        manifest.config = ckpt.config.to_dict()
        report = evaluate_checkpoint(ckpt, ds)
    report.write_csv(out / "report.csv")
    print(report.format())


def cmd_score(args, out: Path, manifest: RunManifest) -> None:
    ckpt = Checkpoint.load(args.ckpt)
    manifest.config = ckpt.config.to_dict()
    ds = load_data(args.data, args)
    x, keep = ds.normalized(dataset_scale=ckpt.config.dataset_scale)
    nll = score_likelihood(ckpt, x, n_rotations=args.rotations, seed=manifest.seed)
    pa = None
    if ds.pose3d is not None:
        pred = predict_poses(ckpt, x)
        gt = ds.pose3d[keep]
        J = ds.skeleton.num_joints
        gt = (gt.reshape(-1, 3, J) - gt.reshape(-1, 3, J)[:, :, ds.skeleton.root: ds.skeleton.root + 1]).reshape(len(gt), -1)
        pa = mpjpe_family(pred, gt)[2]
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pose", "NLL"] + (["PA-MPJPE"] if pa is not None else []))
        for i, idx in enumerate(keep):
            w.writerow([int(idx), repr(float(nll[i]))] + ([repr(float(pa[i]))] if pa is not None else []))
    print(f"scored {len(nll)} poses; mean NLL {float(np.mean(nll)):.4f}")


def cmd_sweep_bases(args, out: Path, manifest: RunManifest) -> None:
    cfg, extras = resolve_config(args)
    bases = [int(b) for b in args.bases.split(",")] if args.bases else [int(b) for b in extras.get("bases", [])]
    if not bases:
        raise CliError("no PCA sizes given (use --bases or a 'bases' list in the config)")
    ds = load_data(args.data, args)
    test = load_data(args.test, args)
    _require_3d(test, args.test)
    rows = []
    for m in bases:
        c = cfg.replace(pca_bases=m, use_pca=True)
        res = train(c, ds)
        rep = evaluate_checkpoint(res.final, test)
        rows.append((m, float(rep.pa_mpjpe.mean())))
        print(f"M={m}  PA-MPJPE {rows[-1][1]:.2f}")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["M", "PA-MPJPE"])
        for m, v in rows:
            w.writerow([m, repr(v)])
    manifest.config = {**cfg.to_dict(), "bases": bases}


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-flow": cmd_pretrain_flow,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "score": cmd_score,
    "sweep-bases": cmd_sweep_bases,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poselift", description="Unsupervised 3D pose lifting from 2D keypoints.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, config=True):
        sp.add_argument("--out-dir", required=True, help="output directory (created; must not hold a manifest)")
        sp.add_argument("--seed", type=int, default=None)
        if config:
            sp.add_argument("--config", help="JSON file of TrainConfig fields")
            sp.add_argument("--no-pca", action="store_true")
            sp.add_argument("--no-elevation", action="store_true")
            sp.add_argument("--no-bone", action="store_true")
            sp.add_argument("--no-nf", action="store_true")
        if data:
            sp.add_argument("--data", required=True, help="keypoint file (.csv or .npz)")
            sp.add_argument("--stride", type=int, default=1, help="keep every n-th pose")
            sp.add_argument("--skeleton", help="skeleton JSON (default: 17-joint H36M layout)")

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    common(sp, data=False, config=False)
    sp.add_argument("--n", type=int, default=20000)
    sp.add_argument("--noise-px", type=float, default=0.0)
    sp.add_argument("--format", choices=("npz", "csv"), default="npz")

    sp = sub.add_parser("pretrain-flow", help="fit the subspace and pretrain the flow")
    common(sp)
    sp.add_argument("--flow-epochs", type=int, default=None)

    sp = sub.add_parser("train", help="train the lifter")
    common(sp)
    sp.add_argument("--flow", help="flow checkpoint from pretrain-flow")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--flow-epochs", type=int, default=None)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint or prediction file")
    common(sp, config=False)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--ckpt")
    g.add_argument("--pred", help="keypoint file whose 3D columns are the predictions")

    sp = sub.add_parser("score", help="per-pose reprojection likelihood")
    common(sp, config=False)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--rotations", type=int, default=100)

    sp = sub.add_parser("sweep-bases", help="PA-MPJPE over PCA subspace sizes")
    common(sp)
    sp.add_argument("--test", required=True, help="3D-labelled evaluation set")
    sp.add_argument("--bases", help="comma-separated list of M values (overrides the config)")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--flow-epochs", type=int, default=None)
    return p


def _input_paths(args) -> dict[str, str]:
    out = {}
    for name in ("config", "data", "test", "pred", "ckpt", "flow", "skeleton"):
        v = getattr(args, name, None)
        if v:
            if not Path(v).is_file():
                raise CliError(f"{name} file not found: {v}")
            out[name] = git_blob_hash(v)
    return out


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    configure_threads()
    out = Path(args.out_dir)
    existed = out.exists()
    before = set(out.iterdir()) if existed else set()
    try:
        if existed and (out / MANIFEST).exists():
            raise CliError(f"{out} already holds a run manifest")
        manifest = RunManifest(command=["poselift", *argv], config={},
                               seed=args.seed if args.seed is not None else 0,
                               inputs=_input_paths(args), started=time.time())
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, out, manifest)
        manifest.finished = time.time()
        manifest.write(out)
    except KeyboardInterrupt:
        _cleanup(out, existed, before)
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - every failure becomes a one-line message
        _cleanup(out, existed, before)
        cause = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"error: {cause}", file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return 1
    return 0


def _cleanup(out: Path, existed: bool, before: set) -> None:
    if not out.exists():
        return
    if not existed:
        shutil.rmtree(out, ignore_errors=True)
        return
    for p in set(out.iterdir()) - before:
        shutil.rmtree(p, ignore_errors=True) if p.is_dir() else p.unlink(missing_ok=True)


if __name__ == "__main__":
    sys.exit(main())
