"""Desk-scale StyleGAN2-style synthesis network, discriminator, and base pretraining.

The synthesis network is conventional: a learned 4x4 constant, modulated 3x3
convolutions with weight demodulation, bilinear upsampling, and a skip RGB
path. Every style input is tagged with a coarse/middle/fine role so the
adaptation machinery can target fine layers only. Once pretrained, the
network is frozen and treated as an immutable snapshot.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import save_tensors, module_tensors, state_checksum
from .config import TrainConfig, derive_seed
from .errors import TrainingError
from .latent import LatentCode, LatentSpace, MappingNetwork, sample_z_batch
from .losses import adversarial_generator_loss, adversarial_losses

AdapterFn = Callable[[int, torch.Tensor, torch.Tensor], torch.Tensor]


class LayerRole(enum.Enum):
    COARSE = "coarse"
    MIDDLE = "middle"
    FINE = "fine"


def resolution_levels(resolution: int) -> list[int]:
    if resolution < 16 or resolution & (resolution - 1):
        raise ValueError(f"resolution must be a power of two >= 16, got {resolution}")
    return [2**k for k in range(2, int(math.log2(resolution)) + 1)]


def fine_resolutions(generator_resolution: int) -> tuple[int, ...]:
    """The (up to) three finest resolution levels, never including 4 or 8."""
    levels = [r for r in resolution_levels(generator_resolution) if r > 8]
    return tuple(levels[-3:])


def layer_role(layer_index: int, resolution_at_layer: int, generator_resolution: int = 256) -> LayerRole:
    """Role of a style input operating at the given spatial resolution."""
    if layer_index < 0:
        raise ValueError(f"layer_index must be >= 0, got {layer_index}")
    if resolution_at_layer not in resolution_levels(generator_resolution):
        raise ValueError(
            f"resolution {resolution_at_layer} is not a level of a {generator_resolution} generator"
        )
    if resolution_at_layer in fine_resolutions(generator_resolution):
        return LayerRole.FINE
    if resolution_at_layer <= 8:
        return LayerRole.COARSE
    return LayerRole.MIDDLE


def num_style_inputs(resolution: int) -> int:
    return 2 * (int(math.log2(resolution)) - 1)


class EqualizedWeight(nn.Module):
    """N(0,1)-initialized weight rescaled at runtime by the He constant."""

    def __init__(self, shape):
        super().__init__()
        self.scale = 1.0 / math.sqrt(math.prod(shape[1:]))
        self.weight = nn.Parameter(torch.randn(shape))

    def forward(self) -> torch.Tensor:
        return self.weight * self.scale


class EqualizedLinear(nn.Module):
    def __init__(self, in_features: int, out_features: int, bias_init: float = 0.0):
        super().__init__()
        self.weight = EqualizedWeight([out_features, in_features])
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight(), self.bias)


class EqualizedConv2d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int):
        super().__init__()
        self.weight = EqualizedWeight([out_channels, in_channels, kernel_size, kernel_size])
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.padding = kernel_size // 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.weight(), self.bias, padding=self.padding)


def modulated_conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    style_scale: torch.Tensor,
    demodulate: bool = True,
    eps: float = 1e-8,
) -> torch.Tensor:
    """Convolution with per-input-channel weight modulation.

    Weights are scaled per input channel by the style; with demodulation each
    output filter is rescaled to unit L2 norm before the convolution runs.
    `style_scale` is (C_in,) or (B, C_in); grouped convolution applies the
    per-sample kernels in one call.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) activations, got shape {tuple(x.shape)}")
    if weight.ndim != 4:
        raise ValueError(f"expected (C_out, C_in, k, k) weights, got shape {tuple(weight.shape)}")
    batch, in_ch, height, width = x.shape
    out_ch, w_in_ch, kh, kw = weight.shape
    if w_in_ch != in_ch:
        raise ValueError(f"weight expects {w_in_ch} input channels, activations have {in_ch}")
    if style_scale.ndim == 1:
        style_scale = style_scale[None].expand(batch, -1)
    if style_scale.shape != (batch, in_ch):
        raise ValueError(
            f"style_scale must be ({in_ch},) or ({batch}, {in_ch}), got {tuple(style_scale.shape)}"
        )
    w = weight[None] * style_scale[:, None, :, None, None]
    if demodulate:
        w = w * torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4), keepdim=True) + eps)
    x = x.reshape(1, batch * in_ch, height, width)
    w = w.reshape(batch * out_ch, in_ch, kh, kw)
    out = F.conv2d(x, w, padding=kh // 2, groups=batch)
    out = out.reshape(batch, out_ch, height, width)
    return out[0] if squeeze else out


@dataclass(frozen=True)
class LayerSpec:
    """One style-consuming conv layer of the synthesis network."""

    style_index: int
    resolution: int
    in_channels: int
    out_channels: int
    role: LayerRole


class StyleLayer(nn.Module):
    """Modulated 3x3 convolution with per-layer style input and optional noise."""

    def __init__(self, latent_dim: int, in_channels: int, out_channels: int):
        super().__init__()
        self.to_scale = EqualizedLinear(latent_dim, in_channels, bias_init=1.0)
        self.weight = EqualizedWeight([out_channels, in_channels, 3, 3])
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.noise_weight = nn.Parameter(torch.zeros(()))

    def forward(self, x: torch.Tensor, w_seg: torch.Tensor, noise: Optional[torch.Tensor] = None):
        y = modulated_conv2d(x, self.weight(), self.to_scale(w_seg), demodulate=True)
        if noise is not None:
            y = y + self.noise_weight * noise
        return F.leaky_relu(y + self.bias[:, None, None], 0.2) * math.sqrt(2.0)


class ToRgb(nn.Module):
    def __init__(self, latent_dim: int, in_channels: int):
        super().__init__()
        self.to_scale = EqualizedLinear(latent_dim, in_channels, bias_init=1.0)
        self.weight = EqualizedWeight([3, in_channels, 1, 1])
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, x: torch.Tensor, w_seg: torch.Tensor) -> torch.Tensor:
        y = modulated_conv2d(x, self.weight(), self.to_scale(w_seg), demodulate=False)
        return y + self.bias[:, None, None]


class SynthesisLevel(nn.Module):
    """All layers operating at one spatial resolution."""

    def __init__(self, latent_dim: int, in_channels: int, out_channels: int, resolution: int):
        super().__init__()
        self.resolution = resolution
        self.conv0 = None if resolution == 4 else StyleLayer(latent_dim, in_channels, out_channels)
        conv1_in = out_channels if resolution > 4 else in_channels
        self.conv1 = StyleLayer(latent_dim, conv1_in, out_channels)
        self.to_rgb = ToRgb(latent_dim, out_channels)


class SynthesisNetwork(nn.Module):
    """Frozen-after-pretraining synthesis network g."""

    def __init__(
        self,
        resolution: int = 64,
        latent_dim: int = 512,
        channel_base: int = 1024,
        channel_max: int = 512,
    ):
        super().__init__()
        self.resolution = resolution
        self.latent_dim = latent_dim
        self.channel_base = channel_base
        self.channel_max = channel_max
        levels = resolution_levels(resolution)
        channels = {r: min(channel_max, channel_base // r) for r in levels}
        self.const = nn.Parameter(torch.randn(channels[4], 4, 4))
        self.levels = nn.ModuleList()
        self.conv_specs: list[LayerSpec] = []
        style_index = 0
        prev = channels[4]
        for res in levels:
            level = SynthesisLevel(latent_dim, prev, channels[res], res)
            self.levels.append(level)
            if level.conv0 is not None:
                self.conv_specs.append(
                    LayerSpec(style_index, res, prev, channels[res], layer_role(style_index, res, resolution))
                )
                style_index += 1
            conv1_in = channels[res] if res > 4 else prev
            self.conv_specs.append(
                LayerSpec(style_index, res, conv1_in, channels[res], layer_role(style_index, res, resolution))
            )
            style_index += 1
            prev = channels[res]
        # toRGB at each level consumes the next style index; the last one is index L-1
        self.num_style_inputs = style_index + 1
        assert self.num_style_inputs == num_style_inputs(resolution)

    @property
    def channels(self) -> dict[int, int]:
        return {r: min(self.channel_max, self.channel_base // r) for r in resolution_levels(self.resolution)}

    def adaptation_layer_specs(self) -> list[LayerSpec]:
        """Specs of the final conv at each fine level, finest-last."""
        fine = fine_resolutions(self.resolution)
        per_level = {}
        for spec in self.conv_specs:
            if spec.resolution in fine:
                per_level[spec.resolution] = spec  # later spec at a level wins
        return [per_level[r] for r in fine]

    def forward(
        self,
        ws: torch.Tensor,
        noise_mode: str = "zero",
        noise_generator: Optional[torch.Generator] = None,
        adapter: Optional[AdapterFn] = None,
    ) -> torch.Tensor:
        """ws is (B, L, d) or (L, d); returns images in [-1, 1].

        `adapter(style_index, conv_input, frozen_output)` may replace any conv
        layer's output; it is called for every conv layer when provided.
        """
        squeeze = ws.ndim == 2
        if squeeze:
            ws = ws[None]
        if ws.shape[1] != self.num_style_inputs:
            raise ValueError(f"expected {self.num_style_inputs} style inputs, got {ws.shape[1]}")
        if ws.shape[2] != self.latent_dim:
            raise ValueError(f"expected latent dim {self.latent_dim}, got {ws.shape[2]}")
        if noise_mode not in ("zero", "seeded"):
            raise ValueError(f"unknown noise_mode {noise_mode!r}")

        def conv(layer: StyleLayer, index: int, x: torch.Tensor) -> torch.Tensor:
            noise = None
            if noise_mode == "seeded":
                noise = torch.randn(
                    (x.shape[0], 1, x.shape[2], x.shape[3]), generator=noise_generator
                )
            out = layer(x, ws[:, index], noise)
            if adapter is not None:
                out = adapter(index, x, out)
            return out

        batch = ws.shape[0]
        x = self.const[None].expand(batch, -1, -1, -1)
        rgb = None
        index = 0
        for level in self.levels:
            if level.conv0 is not None:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
                x = conv(level.conv0, index, x)
                index += 1
            x = conv(level.conv1, index, x)
            index += 1
            y = level.to_rgb(x, ws[:, index])
            if rgb is None:
                rgb = y
            else:
                rgb = F.interpolate(rgb, scale_factor=2, mode="bilinear", align_corners=False) + y
        img = torch.tanh(rgb)
        return img[0] if squeeze else img


def synthesize(
    g: SynthesisNetwork,
    w: LatentCode,
    noise_mode: str = "zero",
    noise_seed: int = 0,
) -> torch.Tensor:
    """Render a single W+ code to a (3, R, R) image in [-1, 1]."""
    if w.space != LatentSpace.WPLUS:
        raise ValueError(f"synthesize needs a W+ code, got {w.space.name}")
    if w.num_segments != g.num_style_inputs:
        raise ValueError(f"code has {w.num_segments} segments, generator expects {g.num_style_inputs}")
    gen = None
    if noise_mode == "seeded":
        gen = torch.Generator().manual_seed(int(noise_seed))
    with torch.no_grad():
        return g(w.segments, noise_mode=noise_mode, noise_generator=gen)


class DiscriminatorBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.skip = EqualizedConv2d(in_channels, out_channels, 1)
        self.conv0 = EqualizedConv2d(in_channels, in_channels, 3)
        self.conv1 = EqualizedConv2d(in_channels, out_channels, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skip = self.skip(F.avg_pool2d(x, 2))
        x = F.leaky_relu(self.conv0(x), 0.2)
        x = F.leaky_relu(self.conv1(x), 0.2)
        x = F.avg_pool2d(x, 2)
        return (x + skip) / math.sqrt(2.0)


class Discriminator(nn.Module):
    """Mirror-image conv stack ending in a single real logit per image."""

    def __init__(self, resolution: int = 64, channel_base: int = 1024, channel_max: int = 512):
        super().__init__()
        self.resolution = resolution
        levels = resolution_levels(resolution)
        channels = {r: min(channel_max, channel_base // r) for r in levels}
        self.from_rgb = EqualizedConv2d(3, channels[resolution], 1)
        self.blocks = nn.ModuleList(
            DiscriminatorBlock(channels[r], channels[r // 2]) for r in reversed(levels[1:])
        )
        self.final_conv = EqualizedConv2d(channels[4], channels[4], 3)
        self.head = EqualizedLinear(channels[4] * 4 * 4, 1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(
                f"expected {self.resolution}x{self.resolution} input, got {tuple(img.shape[-2:])}"
            )
        x = F.leaky_relu(self.from_rgb(img), 0.2)
        for block in self.blocks:
            x = block(x)
        x = F.leaky_relu(self.final_conv(x), 0.2)
        return self.head(x.reshape(x.shape[0], -1)).squeeze(1)


def discriminate(disc, img: torch.Tensor) -> torch.Tensor:
    """Score a single (3, R, R) image; returns a scalar logit."""
    if img.ndim != 3:
        raise ValueError(f"expected a single (3, R, R) image, got shape {tuple(img.shape)}")
    expected = getattr(disc, "resolution", None)
    if expected is not None and img.shape[-2:] != (expected, expected):
        raise ValueError(f"image resolution {tuple(img.shape[-2:])} does not match D ({expected})")
    with torch.no_grad():
        return disc(img[None])[0]


def freeze(module: nn.Module) -> nn.Module:
    """Mark a module immutable: no grads, eval mode."""
    module.requires_grad_(False)
    module.eval()
    module.frozen = True
    return module


def is_frozen(module: nn.Module) -> bool:
    return bool(getattr(module, "frozen", False)) and not any(
        p.requires_grad for p in module.parameters()
    )


@dataclass
class PretrainedBase:
    """Jointly pretrained base: synthesis g, discriminator D, mapping f."""

    synthesis: SynthesisNetwork
    discriminator: Discriminator
    mapper: MappingNetwork
    scalars: list[dict]


def build_base_modules(config: TrainConfig) -> tuple[SynthesisNetwork, Discriminator, MappingNetwork]:
    torch.manual_seed(derive_seed(config.seed, "base-init"))
    g = SynthesisNetwork(config.resolution, config.latent_dim, config.channel_base, config.channel_max)
    d = Discriminator(config.resolution, config.channel_base, config.channel_max)
    f = MappingNetwork(config.latent_dim, config.mapper_depth)
    return g, d, f


def pretrain_base(config: TrainConfig, photos: torch.Tensor) -> PretrainedBase:
    """Train a toy GAN on photos; the result is frozen by the caller.

    Uses the same non-saturating + R1 objective as the adaptation stages.
    """
    if photos.ndim != 4 or photos.shape[1] != 3:
        raise ValueError(f"photos must be (N, 3, R, R), got shape {tuple(photos.shape)}")
    if photos.shape[0] < 256:
        raise ValueError(f"base pretraining needs >= 256 photos, got {photos.shape[0]}")
    if config.resolution > 128:
        raise ValueError("base pretraining is desk-scale only (resolution <= 128)")
    if photos.shape[-1] != config.resolution:
        raise ValueError("photo resolution does not match config.resolution")

    g, d, f = build_base_modules(config)
    opt_g = torch.optim.Adam(
        list(g.parameters()) + list(f.parameters()), lr=config.lr_blocks, betas=(0.0, 0.99)
    )
    opt_d = torch.optim.Adam(d.parameters(), lr=config.lr_disc, betas=(0.0, 0.99))
    rng = torch.Generator().manual_seed(derive_seed(config.seed, "base-train"))
    scalars = []
    for step in range(1, config.steps + 1):
        idx = torch.randint(photos.shape[0], (config.batch_size,), generator=rng)
        real = photos[idx]
        z = sample_z_batch(rng, config.batch_size, g.num_style_inputs, config.latent_dim)
        fake = g(f(z))

        _, l_d, r1 = adversarial_losses(d, real, fake.detach())
        d_total = l_d + config.r1_weight * r1
        _abort_if_not_finite(d_total, {"gen": g, "disc": d, "mapper": f}, config, step)
        opt_d.zero_grad(set_to_none=True)
        d_total.backward()
        opt_d.step()

        l_g = adversarial_generator_loss(d, fake)
        _abort_if_not_finite(l_g, {"gen": g, "disc": d, "mapper": f}, config, step)
        opt_g.zero_grad(set_to_none=True)
        l_g.backward()
        opt_g.step()

        scalars.append(
            {
                "step": step,
                "loss_g": float(l_g.detach()),
                "loss_d": float(l_d.detach()),
                "r1": float(r1.detach()),
            }
        )
    return PretrainedBase(g, d, f, scalars)


def _abort_if_not_finite(loss: torch.Tensor, modules: dict[str, nn.Module], config, step: int) -> None:
    if torch.isfinite(loss.detach()).all():
        return
    path = None
    if config.out_dir is not None:
        tensors = {}
        for prefix, module in modules.items():
            tensors.update(module_tensors(module, prefix))
        path = save_tensors(Path(config.out_dir) / "abort.ckpt", tensors)
    raise TrainingError(f"non-finite loss at step {step}", checkpoint_path=path)


def base_checksums(base: PretrainedBase) -> dict[str, str]:
    return {
        "synthesis": state_checksum(base.synthesis),
        "mapper": state_checksum(base.mapper),
    }
