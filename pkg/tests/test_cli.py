import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from poselift.checkpoint import Checkpoint
from poselift.cli import git_blob_hash, main
from poselift.data import load_keypoints

TINY = dict(epochs=1, batch_size=32, lifter_width=16, flow_width=16, flow_blocks=2,
            flow_epochs=1, flow_batch_size=64, pca_bases=10)


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out-dir", str(d / "train"), "--n", "200", "--seed", "1"]) == 0
    assert main(["synth", "--out-dir", str(d / "test"), "--n", "60", "--seed", "2", "--format", "csv"]) == 0
    (d / "tiny.json").write_text(json.dumps(TINY))
    return d


def test_synth_outputs_and_manifest(work):
    out = work / "train"
    assert {p.name for p in out.iterdir()} == {"poses.npz", "camera.json", "manifest.json"}
    cam = json.loads((out / "camera.json").read_text())
    assert cam["elevation_mu"] == 0.12 and cam["elevation_sigma"] == 0.05 and len(cam["elevation"]) == 200
    m = json.loads((out / "manifest.json").read_text())
    assert m["command"][:2] == ["poselift", "synth"] and m["seed"] == 1 and m["finished"] >= m["started"]


def test_synth_rerun_identical(work, tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path / "again"), "--n", "200", "--seed", "1"]) == 0
    assert (tmp_path / "again" / "poses.npz").read_bytes() == (work / "train" / "poses.npz").read_bytes()


def test_evaluate_perfect_predictions_reports_zeros(work, tmp_path):
    data = str(work / "test" / "poses.csv")
    assert main(["evaluate", "--out-dir", str(tmp_path / "ev"), "--data", data, "--pred", data]) == 0
    rows = _rows(tmp_path / "ev" / "report.csv")
    assert rows[0] == ["pose", "MPJPE", "N-MPJPE", "PA-MPJPE"]
    per_pose = [r for r in rows[1:] if not r[0].startswith("#")]
    assert len(per_pose) == 60
    assert all(float(v) == 0.0 for r in per_pose for v in r[1:3])
    assert all(float(r[3]) < 1e-9 for r in per_pose)
    summary = {r[0]: float(r[1]) for r in rows if r[0].startswith("#")}
    assert summary["#PCK"] == 100 and summary["#AUC"] == 100 and summary["#CPS"] == 300
    m = json.loads((tmp_path / "ev" / "manifest.json").read_text())
    assert m["inputs"]["data"] == git_blob_hash(data)


def test_train_evaluate_score_pipeline(work, tmp_path):
    train_data = str(work / "train" / "poses.npz")
    test_data = str(work / "test" / "poses.csv")
    cfg = str(work / "tiny.json")
    assert main(["pretrain-flow", "--out-dir", str(tmp_path / "flow"), "--data", train_data, "--config", cfg]) == 0
    flow = Checkpoint.load(tmp_path / "flow" / "flow.ckpt")
    assert flow.extra["kind"] == "flow" and flow.pca.n_components == 10
    assert main(["train", "--out-dir", str(tmp_path / "run"), "--data", train_data, "--config", cfg,
                 "--flow", str(tmp_path / "flow" / "flow.ckpt"), "--epochs", "2"]) == 0
    run = tmp_path / "run"
    assert {"metrics.csv", "best.ckpt", "final.ckpt", "manifest.json"} <= {p.name for p in run.iterdir()}
    assert json.loads((run / "manifest.json").read_text())["config"]["epochs"] == 2
    ck = str(run / "final.ckpt")
    assert main(["evaluate", "--out-dir", str(tmp_path / "ev"), "--data", test_data, "--ckpt", ck]) == 0
    assert len(_rows(tmp_path / "ev" / "report.csv")) == 1 + 60 + 7
    assert main(["score", "--out-dir", str(tmp_path / "sc"), "--data", test_data, "--ckpt", ck,
                 "--rotations", "3"]) == 0
    rows = _rows(tmp_path / "sc" / "scores.csv")
    assert rows[0] == ["pose", "NLL", "PA-MPJPE"] and len(rows) == 61
    assert all(np.isfinite(float(r[1])) for r in rows[1:])


def test_flow_with_wrong_subspace_rejected(work, tmp_path):
    train_data = str(work / "train" / "poses.npz")
    cfg = str(work / "tiny.json")
    assert main(["pretrain-flow", "--out-dir", str(tmp_path / "flow"), "--data", train_data, "--config", cfg]) == 0
    rc = main(["train", "--out-dir", str(tmp_path / "run"), "--data", train_data, "--config", cfg,
               "--flow", str(tmp_path / "flow" / "flow.ckpt"), "--no-pca"])
    assert rc == 1 and not (tmp_path / "run").exists()


def test_sweep_bases_emits_one_row_per_size(work, tmp_path):
    cfg = dict(TINY, bases=[15, 20, 26, 32])
    (tmp_path / "sweep.json").write_text(json.dumps(cfg))
    assert main(["sweep-bases", "--out-dir", str(tmp_path / "sw"), "--data", str(work / "train" / "poses.npz"),
                 "--test", str(work / "test" / "poses.csv"), "--config", str(tmp_path / "sweep.json")]) == 0
    rows = _rows(tmp_path / "sw" / "sweep.csv")
    assert rows[0] == ["M", "PA-MPJPE"] and [int(r[0]) for r in rows[1:]] == [15, 20, 26, 32]
    assert all(np.isfinite(float(r[1])) for r in rows[1:])


def test_flags_override_config(work, tmp_path):
    cfg = str(work / "tiny.json")
    assert main(["train", "--out-dir", str(tmp_path / "r"), "--data", str(work / "train" / "poses.npz"),
                 "--config", cfg, "--no-bone", "--no-elevation", "--seed", "3"]) == 0
    c = json.loads((tmp_path / "r" / "manifest.json").read_text())["config"]
    assert c["use_bone"] is False and c["use_elevation"] is False and c["seed"] == 3 and c["use_pca"] is True
    metrics = _rows(tmp_path / "r" / "metrics.csv")
    assert all(float(r[4]) == 0.0 for r in metrics[1:])


def test_existing_manifest_is_an_error(work, capsys):
    rc = main(["synth", "--out-dir", str(work / "train"), "--n", "10"])
    err = capsys.readouterr().err.strip().splitlines()
    assert rc == 1 and len(err) == 1 and err[0].startswith("error:") and "manifest" in err[0]
    assert (work / "train" / "poses.npz").exists()


def test_failure_removes_partial_outputs(work, tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"no_such_field": 1}))
    out = tmp_path / "x"
    rc = main(["train", "--out-dir", str(out), "--data", str(work / "train" / "poses.npz"),
               "--config", str(tmp_path / "bad.json")])
    assert rc == 1 and not out.exists()
    assert "no_such_field" in capsys.readouterr().err
    keep = tmp_path / "keep"
    keep.mkdir()
    (keep / "mine.txt").write_text("hello")
    rc = main(["evaluate", "--out-dir", str(keep), "--data", str(work / "train" / "poses.npz"),
               "--pred", str(tmp_path / "missing.csv")])
    assert rc == 1 and [p.name for p in keep.iterdir()] == ["mine.txt"]


def test_missing_3d_is_reported(work, tmp_path, capsys):
    ds = load_keypoints(work / "test" / "poses.csv", __import__("poselift").h36m_skeleton())
    ds.pose3d = None
    from poselift.data import save_keypoints
    save_keypoints(ds, tmp_path / "only2d.csv")
    rc = main(["evaluate", "--out-dir", str(tmp_path / "e"), "--data", str(tmp_path / "only2d.csv"),
               "--pred", str(tmp_path / "only2d.csv")])
    assert rc == 1 and "no 3D ground truth" in capsys.readouterr().err


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "poselift.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "pretrain-flow", "train", "evaluate", "score", "sweep-bases"):
        assert cmd in out.stdout
