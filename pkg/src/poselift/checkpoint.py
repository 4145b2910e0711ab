"""Versioned single-file checkpoint.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"PLIFTCKP"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header
    then       payload   tensor blobs, each starting on an 8-byte boundary
                         relative to the payload start

The header holds the config echo, skeleton, bone prior, inference-time
elevation statistics, PCA total variance, free-form ``extra`` metadata and a
``tensors`` table of ``{name, dtype, shape, offset, nbytes}``. Floating
tensors are stored as ``<f4``, integer buffers as ``<i4``, RNG states as
``|u1``. Tensor names are prefixed ``lifter.``, ``flow.``, ``pca.`` or
``rng.``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .flow import CouplingFlow
from .geometry import SkeletonSpec
from .lifter import LifterNet
from .objective import BonePrior
from .subspace import PcaModel

MAGIC = b"PLIFTCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def f32_exact(a: np.ndarray) -> np.ndarray:
    """Round to float32 precision (kept as float64) so storage is lossless."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class Checkpoint:
    config: TrainConfig
    skeleton: SkeletonSpec
    lifter_state: dict[str, torch.Tensor]
    flow_state: dict[str, torch.Tensor]
    pca: PcaModel
    bone_prior: BonePrior
    elevation_mu: float = 0.0
    elevation_sigma: float = 1e-3
    rng: dict[str, torch.Tensor] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    # -- model reconstruction ------------------------------------------------
    def build_lifter(self) -> LifterNet:
        c = self.config
        net = LifterNet(self.skeleton.num_joints, c.lifter_width, c.lifter_blocks, input_scale=1.0 / c.image_scale)
        net.load_state_dict(self.lifter_state)
        return net.eval()

    def build_flow(self) -> CouplingFlow:
        c = self.config
        flow = CouplingFlow(self.pca.n_components, c.flow_blocks, c.flow_width, seed=c.seed)
        flow.load_state_dict(self.flow_state)
        return flow.eval()

    # -- serialization -------------------------------------------------------
    def _arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for prefix, state in (("lifter.", self.lifter_state), ("flow.", self.flow_state)):
            for k, v in state.items():
                out.append((prefix + k, v.detach().cpu().numpy()))
        out += [("pca.mean", self.pca.mean), ("pca.basis", self.pca.basis), ("pca.variances", self.pca.variances)]
        for k, v in self.rng.items():
            out.append(("rng." + k, v.cpu().numpy()))
        return out

    def save(self, path: str | Path) -> None:
        table, blobs, offset = [], [], 0
        for name, a in self._arrays():
            if name.startswith("rng."):
                arr = np.ascontiguousarray(a, dtype="|u1")
            elif np.issubdtype(a.dtype, np.integer):
                arr = np.ascontiguousarray(a, dtype="<i4")
            else:
                arr = np.ascontiguousarray(a, dtype="<f4")
            raw = arr.tobytes()
            table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            pad = (-len(raw)) % 8
            blobs.append(raw + b"\0" * pad)
            offset += len(raw) + pad
        header = {
            "config": self.config.to_dict(),
            "skeleton": self.skeleton.to_json(),
            "bone_prior": {"means": list(self.bone_prior.means), "sigma": self.bone_prior.sigma,
                           "from_batch": self.bone_prior.from_batch},
            "elevation": {"mu": self.elevation_mu, "sigma": self.elevation_sigma},
            "pca_total_variance": self.pca.total_variance,
            "extra": self.extra,
            "tensors": table,
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(hb)))
            fh.write(hb)
            for b in blobs:
                fh.write(b)
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        buf = Path(path).read_bytes()
        if buf[:8] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, hlen = struct.unpack_from("<IQ", buf, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(buf[20: 20 + hlen].decode("utf-8"))
        base = 20 + hlen
        arrays = {}
        for t in header["tensors"]:
            start = base + t["offset"]
            a = np.frombuffer(buf, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=np.int64)),
                              offset=start).reshape(t["shape"])
            arrays[t["name"]] = a.copy()

        def state(prefix):
            st = {}
            for k, a in arrays.items():
                if k.startswith(prefix):
                    ten = torch.from_numpy(a.astype(np.int64) if a.dtype.kind == "i" else a)
                    st[k[len(prefix):]] = ten
            return st

        pca = PcaModel(
            mean=arrays["pca.mean"].astype(np.float64),
            basis=arrays["pca.basis"].astype(np.float64),
            variances=arrays["pca.variances"].astype(np.float64),
            total_variance=float(header["pca_total_variance"]),
        )
        bp = header["bone_prior"]
        return cls(
            config=TrainConfig.from_dict(header["config"]),
            skeleton=SkeletonSpec.from_json(header["skeleton"]),
            lifter_state=state("lifter."),
            flow_state=state("flow."),
            pca=pca,
            bone_prior=BonePrior(tuple(bp["means"]), float(bp["sigma"]), bool(bp.get("from_batch", False))),
            elevation_mu=float(header["elevation"]["mu"]),
            elevation_sigma=float(header["elevation"]["sigma"]),
            rng={k[4:]: torch.from_numpy(a) for k, a in arrays.items() if k.startswith("rng.")},
            extra=header["extra"],
        )
