"""Run configuration, derived sub-seeds, and the key=value config file format."""

from __future__ import annotations

import enum
import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .losses import LossWeights

DETERMINISM_ENV_VAR = "PSSG_DETERMINISTIC"


class Stage(enum.Enum):
    DOMAIN_TRANSFER = "I"
    CONDITIONAL_REFINEMENT = "II"


def as_stage(value) -> Stage:
    if isinstance(value, Stage):
        return value
    return Stage(str(value))


@dataclass
class TrainConfig:
    """Shared knobs for base pretraining, encoder training, and adaptation."""

    stage: Stage = Stage.DOMAIN_TRANSFER
    steps: int = 1000
    batch_size: int = 4
    lr_blocks: float = 2e-3
    lr_disc: float = 2e-3
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    resolution: int = 64
    latent_dim: int = 512
    attn_dim: int | None = None
    mapper_depth: int = 4
    channel_base: int = 1024
    channel_max: int = 512
    r1_weight: float = 1.0
    checkpoint_every: int = 0
    out_dir: Path | None = None
    photo_dir: Path | None = None
    sketch_dir: Path | None = None

    def __post_init__(self):
        self.stage = as_stage(self.stage)
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr_blocks", "lr_disc"):
            rate = getattr(self, name)
            if not math.isfinite(rate) or rate <= 0:
                raise ValueError(f"{name} must be finite and > 0, got {rate}")
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)


def derive_seed(seed: int, component: str) -> int:
    """Stable 63-bit sub-seed from (seed, component-name)."""
    digest = hashlib.sha256(f"{seed}/{component}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def deterministic_requested() -> bool:
    return os.environ.get(DETERMINISM_ENV_VAR, "") == "1"


def apply_determinism() -> None:
    """Force the numeric backend into deterministic mode."""
    torch.use_deterministic_algorithms(True)


def parse_config_file(path) -> dict[str, str]:
    """Flat key=value text with '#' comments; later lines win."""
    out: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_overrides(pairs) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ValueError(f"override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out
