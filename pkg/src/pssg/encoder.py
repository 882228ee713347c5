"""Image-to-latent inversion: a strided-conv encoder plus an optimization oracle.

The encoder is trained self-supervised against the frozen generator: sample
codes, render them, and regress the codes back from the renders. Shallow
backbone stages feed the fine segments and deep stages the coarse ones.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig, derive_seed
from .generator import SynthesisNetwork, is_frozen
from .latent import LatentCode, LatentSpace, MappingNetwork, sample_z_batch
from .losses import IdentityEmbedder, identity_loss


class Encoder(nn.Module):
    """Maps images to Z+ codes with one head per latent segment."""

    def __init__(
        self,
        resolution: int,
        latent_dim: int,
        segment_resolutions,
        base_channels: int = 32,
        channel_max: int = 256,
    ):
        super().__init__()
        self.resolution = resolution
        self.latent_dim = latent_dim
        self.segment_resolutions = tuple(int(r) for r in segment_resolutions)
        num_stages = int(math.log2(resolution)) - 2  # downsample until 4x4
        chans = [3] + [min(channel_max, base_channels * 2**i) for i in range(num_stages)]
        self.stages = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(num_stages)
        )
        heads = []
        self._stage_for_segment = []
        for res in self.segment_resolutions:
            ratio = max(1, resolution // res)
            stage = min(num_stages - 1, max(0, int(math.log2(ratio))))
            self._stage_for_segment.append(stage)
            heads.append(nn.Linear(chans[stage + 1], latent_dim))
        self.heads = nn.ModuleList(heads)

    @property
    def num_segments(self) -> int:
        return len(self.heads)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        squeeze = img.ndim == 3
        if squeeze:
            img = img[None]
        if img.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(
                f"encoder expects {self.resolution}x{self.resolution} input, got {tuple(img.shape[-2:])}"
            )
        x = img
        pooled = []
        for stage in self.stages:
            x = F.leaky_relu(stage(x), 0.2)
            pooled.append(x.mean(dim=(2, 3)))
        segments = [
            head(pooled[stage]) for head, stage in zip(self.heads, self._stage_for_segment)
        ]
        out = torch.stack(segments, dim=1)
        return out[0] if squeeze else out


def build_encoder(synthesis: SynthesisNetwork, seed: int = 0, base_channels: int = 32) -> Encoder:
    """Encoder matched to a generator's resolution and style layout."""
    torch.manual_seed(seed)
    segment_res = [spec.resolution for spec in synthesis.conv_specs]
    segment_res.append(synthesis.resolution)  # final toRGB segment
    return Encoder(synthesis.resolution, synthesis.latent_dim, segment_res, base_channels)


def encode(encoder: Encoder, img: torch.Tensor) -> LatentCode:
    """Deterministically embed one image into Z+."""
    if img.ndim != 3:
        raise ValueError(f"expected a single (3, R, R) image, got shape {tuple(img.shape)}")
    with torch.no_grad():
        return LatentCode(LatentSpace.ZPLUS, encoder(img))


def train_encoder(
    encoder: Encoder,
    synthesis: SynthesisNetwork,
    mapper: MappingNetwork,
    config: TrainConfig,
    embedder: IdentityEmbedder | None = None,
    identity_weight: float = 0.1,
) -> tuple[Encoder, list[dict]]:
    """Self-supervised training on (code, render) pairs sampled from g.

    Minimizes W+ regression error plus image reconstruction, with an optional
    identity-embedding term. The generator and mapper stay untouched.
    """
    if not is_frozen(synthesis) or not is_frozen(mapper):
        raise ValueError("train_encoder requires a frozen generator and mapper")
    opt = torch.optim.Adam(encoder.parameters(), lr=config.lr_blocks, betas=(0.9, 0.99))
    rng = torch.Generator().manual_seed(derive_seed(config.seed, "encoder-train"))
    scalars = []
    for step in range(1, config.steps + 1):
        with torch.no_grad():
            z = sample_z_batch(rng, config.batch_size, synthesis.num_style_inputs, config.latent_dim)
            ws = mapper(z)
            imgs = synthesis(ws)
        pred_w = mapper(encoder(imgs))
        recon = synthesis(pred_w)
        latent_l2 = F.mse_loss(pred_w, ws)
        recon_l2 = F.mse_loss(recon, imgs)
        loss = latent_l2 + recon_l2
        ident = None
        if embedder is not None:
            ident = identity_loss(embedder, recon, imgs)
            loss = loss + identity_weight * ident
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        row = {"step": step, "latent_l2": float(latent_l2), "recon_l2": float(recon_l2)}
        if ident is not None:
            row["identity"] = float(ident)
        scalars.append(row)
    return encoder, scalars


def reconstruction_error(
    encoder: Encoder,
    synthesis: SynthesisNetwork,
    mapper: MappingNetwork,
    imgs: torch.Tensor,
) -> torch.Tensor:
    """Per-image L2 reconstruction error of the encode->map->render round trip."""
    with torch.no_grad():
        recon = synthesis(mapper(encoder(imgs)))
        return (recon - imgs).pow(2).mean(dim=(1, 2, 3))


def invert_by_optimization(
    synthesis: SynthesisNetwork,
    mapper: MappingNetwork,
    img: torch.Tensor,
    steps: int,
    seed: int = 0,
    lr: float = 0.05,
) -> LatentCode:
    """Gradient-descend a Z+ code minimizing pixel reconstruction; returns the best iterate."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(
        synthesis.num_style_inputs, synthesis.latent_dim, generator=gen
    ).requires_grad_(True)
    opt = torch.optim.Adam([z], lr=lr)
    best_loss = math.inf
    best_z = z.detach().clone()
    for _ in range(steps):
        recon = synthesis(mapper(z[None]))[0]
        loss = F.mse_loss(recon, img)
        if float(loss) < best_loss:
            best_loss = float(loss)
            best_z = z.detach().clone()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    with torch.no_grad():
        final = F.mse_loss(synthesis(mapper(z[None]))[0], img)
    if float(final) < best_loss:
        best_z = z.detach().clone()
    return LatentCode(LatentSpace.ZPLUS, best_z)
