"""Training configuration and its JSON form."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .flow import FlowTrainConfig
from .objective import LossConfig


@dataclass
class TrainConfig:
    seed: int = 0
    # lifter
    epochs: int = 100
    batch_size: int = 256
    lr: float = 2e-4
    lr_decay: float = 0.95
    weight_decay: float = 1e-5
    decoupled_weight_decay: bool = False
    lifter_width: int = 1024
    lifter_blocks: int = 3
    # flow pretraining
    flow_epochs: int = 100
    flow_batch_size: int = 256
    flow_lr: float = 1e-4
    flow_lr_milestones: tuple[int, ...] = (10, 20, 30)
    flow_lr_gamma: float = 0.1
    flow_width: int = 1024
    flow_blocks: int = 8
    unfreeze_flow: bool = False
    # subspace
    pca_bases: int = 26
    # objective
    depth: float = 10.0
    image_scale: float = 0.1
    sigma_b: float = 0.1
    bone_weight: float = 50.0
    # "config" (skeleton file) or "batch" (re-estimated per batch)
    bone_source: str = "config"
    detach_target: bool = False
    detach_correction: bool = False
    # ablation switches
    use_pca: bool = True
    use_elevation: bool = True
    use_bone: bool = True
    use_nf: bool = True
    # data
    val_fraction: float = 0.05
    dataset_scale: bool = False
    # 32 or 64
    precision: int = 32

    def lifter_lr(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** epoch

    def loss_config(self) -> LossConfig:
        return LossConfig(
            depth=self.depth,
            image_scale=self.image_scale,
            bone_weight=self.bone_weight,
            use_nf=self.use_nf,
            use_bone=self.use_bone,
            use_elevation=self.use_elevation,
            detach_target=self.detach_target,
            detach_correction=self.detach_correction,
        )

    def flow_config(self) -> FlowTrainConfig:
        return FlowTrainConfig(
            epochs=self.flow_epochs,
            batch_size=self.flow_batch_size,
            lr=self.flow_lr,
            lr_milestones=tuple(self.flow_lr_milestones),
            lr_gamma=self.flow_lr_gamma,
            weight_decay=self.weight_decay,
            decoupled_weight_decay=self.decoupled_weight_decay,
            n_blocks=self.flow_blocks,
            hidden=self.flow_width,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["flow_lr_milestones"] = list(self.flow_lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        d = dict(d)
        if "flow_lr_milestones" in d:
            d["flow_lr_milestones"] = tuple(d["flow_lr_milestones"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)
