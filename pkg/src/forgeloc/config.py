"""Training configuration: every knob the engine, model and CLI agree on."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path


@dataclass
class TrainConfig:
    # data / model geometry
    image_size: int = 256
    base_width: int = 16          # channel width C of the finest branch
    scale_step: int = 2           # resolution/width ratio s between adjacent branches
    exchange_blocks: int = 2
    # optimizer schedule
    lr0: float = 2e-4
    lr_floor: float = 1e-8
    lr_decay_every: int = 5
    lr_decay_factor: float = 0.5
    epochs: int = 50
    batch_size: int = 8
    grad_clip: float = 5.0
    # loss
    edge_weight: float = 1.0
    edge_mode: str = "absolute"   # "absolute" or "literal"
    use_edge_loss: bool = True
    class_balance: bool = True    # inverse-frequency detection class weights
    # feature-branch toggles
    use_rgb: bool = True
    use_noise: bool = True
    use_srm: bool = False
    use_frequency: bool = True
    use_dam: bool = True
    allow_noise_and_srm: bool = False
    # heads
    detach_prior: bool = False
    # run control
    augment: bool = True
    seed: int = 0
    deterministic: bool = False
    checkpoint_every: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (self.lr0 > self.lr_floor > 0):
            raise ValueError(f"need lr0 > lr_floor > 0, got lr0={self.lr0}, lr_floor={self.lr_floor}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.scale_step < 1:
            raise ValueError("scale_step must be >= 1")
        if self.image_size % 8 != 0:
            raise ValueError(f"image_size must be a multiple of 8, got {self.image_size}")
        if self.image_size % self.scale_step ** 3 != 0:
            raise ValueError(
                f"image_size must be divisible by scale_step**3 = {self.scale_step ** 3}"
            )
        if self.edge_mode not in ("absolute", "literal"):
            raise ValueError(f"edge_mode must be 'absolute' or 'literal', got {self.edge_mode!r}")
        if self.edge_weight < 0:
            raise ValueError("edge_weight must be >= 0")
        if self.use_noise and self.use_srm and not self.allow_noise_and_srm:
            raise ValueError("noise and srm branches are exclusive unless allow_noise_and_srm is set")
        if not (self.use_rgb or self.use_noise or self.use_srm):
            raise ValueError("at least one spatial branch (rgb, noise, srm) must be enabled")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def replace(self, **kwargs) -> "TrainConfig":
        return dataclasses.replace(self, **kwargs)


def config_diff(a: dict, b: dict) -> str:
    """Human-readable diff of two config dicts (used when refusing mismatched checkpoints)."""
    lines = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key, "<missing>"), b.get(key, "<missing>")
        if va != vb:
            lines.append(f"  {key}: {va!r} != {vb!r}")
    return "\n".join(lines)
