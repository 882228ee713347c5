"""Latent spaces, the mapping network, and latent-code plumbing.

A latent code is a stack of one vector per style input of the synthesis
network. Codes live either in the pre-mapping stack (Z+) or in the
post-mapping stack (W+) that the generator consumes; the mapping MLP is
applied independently to every segment.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ArtifactError

LATENT_MAGIC = b"PSSL"
LATENT_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIBII")


class LatentSpace(enum.IntEnum):
    ZPLUS = 0
    WPLUS = 1


@dataclass(frozen=True, eq=False)
class LatentCode:
    """Per-layer latent stack with shape (num_segments, dim)."""

    space: LatentSpace
    segments: torch.Tensor

    def __post_init__(self):
        if self.segments.ndim != 2:
            raise ValueError(f"segments must be 2-d (L, d), got shape {tuple(self.segments.shape)}")
        if self.segments.shape[0] < 1 or self.segments.shape[1] < 1:
            raise ValueError("latent code needs at least one segment and one dimension")
        if not torch.isfinite(self.segments).all():
            raise ValueError("latent code contains non-finite entries")

    @property
    def num_segments(self) -> int:
        return int(self.segments.shape[0])

    @property
    def dim(self) -> int:
        return int(self.segments.shape[1])


def sample_z_plus(rng_seed: int, num_segments: int, dim: int) -> LatentCode:
    """Draw a Z+ code with i.i.d. standard-normal segments, reproducible from the seed."""
    if num_segments < 1:
        raise ValueError(f"num_segments must be >= 1, got {num_segments}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    gen = torch.Generator().manual_seed(int(rng_seed))
    return LatentCode(LatentSpace.ZPLUS, torch.randn(num_segments, dim, generator=gen))


def sample_z_batch(generator: torch.Generator, batch_size: int, num_segments: int, dim: int) -> torch.Tensor:
    """Batched Z+ draw, (B, L, d), consuming state from the caller's generator."""
    return torch.randn(batch_size, num_segments, dim, generator=generator)


class MappingNetwork(nn.Module):
    """MLP applied segment-wise; depth 0 is the identity map."""

    def __init__(self, dim: int, depth: int = 4):
        super().__init__()
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        if depth < 0:
            raise ValueError(f"depth must be >= 0, got {depth}")
        self.dim = dim
        self.depth = depth
        self.layers = nn.ModuleList(nn.Linear(dim, dim) for _ in range(depth))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected last dim {self.dim}, got {x.shape[-1]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < self.depth:
                x = F.leaky_relu(x, 0.2)
        return x


def map_to_w_plus(mapper: MappingNetwork, z: LatentCode) -> LatentCode:
    """Map a Z+ code to W+ by running every segment through the mapper."""
    if z.space != LatentSpace.ZPLUS:
        raise ValueError(f"expected a Z+ code, got {z.space.name}")
    return LatentCode(LatentSpace.WPLUS, mapper(z.segments))


def apply_latent_edit(
    code: LatentCode,
    direction,
    magnitude: float,
    layer_range: tuple[int, int],
) -> LatentCode:
    """Add magnitude*direction to the segments in the inclusive index interval."""
    direction = torch.as_tensor(direction, dtype=code.segments.dtype)
    if direction.shape != (code.dim,):
        raise ValueError(f"direction must have shape ({code.dim},), got {tuple(direction.shape)}")
    lo, hi = int(layer_range[0]), int(layer_range[1])
    if not (0 <= lo <= hi < code.num_segments):
        raise ValueError(f"layer_range {layer_range} out of bounds for {code.num_segments} segments")
    segments = code.segments.clone()
    segments[lo : hi + 1] = segments[lo : hi + 1] + float(magnitude) * direction
    return LatentCode(code.space, segments)


def save_latent(code: LatentCode, path) -> Path:
    """Serialize as: magic, version u32, space u8, L u32, d u32, then L*d LE float32."""
    path = Path(path)
    header = _HEADER.pack(
        LATENT_MAGIC, LATENT_FORMAT_VERSION, int(code.space), code.num_segments, code.dim
    )
    payload = (
        code.segments.detach().to(torch.float32).contiguous().cpu().numpy().astype("<f4").tobytes()
    )
    path.write_bytes(header + payload)
    return path


def load_latent(path) -> LatentCode:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"latent file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise ArtifactError(f"latent file too short: {path}")
    magic, version, space, num_segments, dim = _HEADER.unpack_from(blob)
    if magic != LATENT_MAGIC:
        raise ArtifactError(f"bad magic in {path}: {magic!r}")
    if version != LATENT_FORMAT_VERSION:
        raise ArtifactError(f"unsupported latent format version {version}")
    expected = _HEADER.size + 4 * num_segments * dim
    if len(blob) != expected:
        raise ArtifactError(f"latent payload size mismatch in {path}")
    arr = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(num_segments, dim).copy()
    return LatentCode(LatentSpace(space), torch.from_numpy(arr))
