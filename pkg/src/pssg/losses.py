"""Loss terms for both training stages, plus the fixed metric networks.

The perceptual-style losses run on feature pyramids from a small fixed
random-weight conv stack; the identity loss runs on unit-normalized
embeddings from a second fixed stack. Random features are adequate
perceptual metrics at this scale and keep the artifact self-contained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class LossWeights:
    """Non-negative coefficients for the stage objectives."""

    adv: float = 1.0
    contextual: float = 0.25
    feature_match: float = 1.0
    identity: float = 1.0
    perceptual: float = 1.0
    reg: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {value}")


def _fixed_conv(in_ch: int, out_ch: int, gen: torch.Generator, kernel: int = 3) -> nn.Conv2d:
    conv = nn.Conv2d(in_ch, out_ch, kernel, stride=2, padding=kernel // 2)
    std = math.sqrt(2.0 / (in_ch * kernel * kernel))
    with torch.no_grad():
        conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
        conv.bias.zero_()
    return conv


class FeatureExtractor(nn.Module):
    """Fixed strided conv stack; returns one feature map per tap layer."""

    def __init__(self, widths=(16, 32, 64), seed: int = 17, trainable: bool = False):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = [3, *widths]
        self.convs = nn.ModuleList(
            _fixed_conv(chans[i], chans[i + 1], gen) for i in range(len(widths))
        )
        self.tap_channels = tuple(widths)
        if not trainable:
            self.requires_grad_(False)

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        x = img if img.ndim == 4 else img[None]
        taps = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            taps.append(x)
        return taps


class IdentityEmbedder(nn.Module):
    """Fixed conv stack ending in a unit-normalized 128-d embedding."""

    def __init__(self, widths=(16, 32, 64), embed_dim: int = 128, seed: int = 29):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = [3, *widths]
        self.convs = nn.ModuleList(
            _fixed_conv(chans[i], chans[i + 1], gen) for i in range(len(widths))
        )
        self.head = nn.Linear(widths[-1], embed_dim)
        with torch.no_grad():
            self.head.weight.copy_(
                torch.randn(self.head.weight.shape, generator=gen) / math.sqrt(widths[-1])
            )
            self.head.bias.zero_()
        self.requires_grad_(False)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = img if img.ndim == 4 else img[None]
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        x = x.mean(dim=(2, 3))
        emb = self.head(x)
        emb = emb / (emb.norm(dim=-1, keepdim=True) + 1e-12)
        return emb if img.ndim == 4 else emb[0]


def _feature_positions(feat: torch.Tensor) -> torch.Tensor:
    """(C, H, W) -> (H*W, C) set of per-position feature vectors."""
    if feat.ndim != 3:
        raise ValueError(f"expected a (C, H, W) feature map, got shape {tuple(feat.shape)}")
    return feat.reshape(feat.shape[0], -1).T


def contextual_loss(feats_g, feats_s, bandwidth: float = 0.5) -> torch.Tensor:
    """Contextual similarity between two feature sets, summed over taps.

    Per tap: pairwise cosine distances, row-normalized by the row minimum,
    turned into affinities exp((1 - d_norm)/h) and row-softmax-normalized;
    the score is the mean over target features of the best affinity, and the
    loss is -log of it.
    """
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    if len(feats_g) != len(feats_s) or not feats_g:
        raise ValueError("feature lists must be non-empty and structurally equal")
    total = None
    for fg, fs in zip(feats_g, feats_s):
        g = fg if fg.ndim == 2 else _feature_positions(fg)
        s = fs if fs.ndim == 2 else _feature_positions(fs)
        if g.shape[0] == 0 or s.shape[0] == 0:
            raise ValueError("empty feature set")
        gn = g / (g.norm(dim=1, keepdim=True) + 1e-8)
        sn = s / (s.norm(dim=1, keepdim=True) + 1e-8)
        dist = 1.0 - gn @ sn.T  # rows: generated features, cols: target features
        dist_norm = dist / (dist.min(dim=1, keepdim=True).values + 1e-5)
        affinity = torch.softmax((1.0 - dist_norm) / bandwidth, dim=1)
        score = affinity.max(dim=0).values.mean()
        term = -torch.log(score.clamp_min(1e-12))
        total = term if total is None else total + term
    return total


def _cap_positions(feat: torch.Tensor, max_positions: int) -> torch.Tensor:
    """Average-pool a (C, H, W) map until it has at most max_positions vectors."""
    while feat.shape[-2] * feat.shape[-1] > max_positions:
        feat = F.avg_pool2d(feat[None], 2)[0]
    return _feature_positions(feat)


def image_contextual_loss(
    extractor: FeatureExtractor,
    img: torch.Tensor,
    ref: torch.Tensor,
    bandwidth: float = 0.5,
    max_positions: int = 256,
) -> torch.Tensor:
    """Per-sample contextual loss between two image batches, averaged."""
    a = img if img.ndim == 4 else img[None]
    b = ref if ref.ndim == 4 else ref[None]
    feats_a = extractor(a)
    feats_b = extractor(b)
    total = None
    for i in range(a.shape[0]):
        sets_a = [_cap_positions(f[i], max_positions) for f in feats_a]
        sets_b = [_cap_positions(f[i], max_positions) for f in feats_b]
        term = contextual_loss(sets_a, sets_b, bandwidth)
        total = term if total is None else total + term
    return total / a.shape[0]


def feature_matching_loss(feats_g, feats_s) -> torch.Tensor:
    """Channel-wise mean/std matching, summed over taps."""
    if len(feats_g) != len(feats_s):
        raise ValueError("tap structure mismatch")
    total = None
    for fg, fs in zip(feats_g, feats_s):
        if fg.shape != fs.shape:
            raise ValueError(f"feature shape mismatch: {tuple(fg.shape)} vs {tuple(fs.shape)}")
        a = fg if fg.ndim == 4 else fg[None]
        b = fs if fs.ndim == 4 else fs[None]
        mu_a, mu_b = a.mean(dim=(2, 3)), b.mean(dim=(2, 3))
        sd_a = a.var(dim=(2, 3), unbiased=False).clamp_min(1e-12).sqrt()
        sd_b = b.var(dim=(2, 3), unbiased=False).clamp_min(1e-12).sqrt()
        term = (mu_a - mu_b).norm(dim=1).mean() + (sd_a - sd_b).norm(dim=1).mean()
        total = term if total is None else total + term
    return total


def identity_loss(embedder: IdentityEmbedder, img: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity of the two embeddings, in [0, 2].

    Computed as 0.5*||e_a - e_b||^2, which equals 1 - cos for unit vectors
    and is exactly zero for identical inputs.
    """
    if img.shape != ref.shape:
        raise ValueError("identity loss needs equal-resolution inputs")
    e_a = embedder(img)
    e_b = embedder(ref)
    return 0.5 * (e_a - e_b).pow(2).sum(dim=-1).mean()


def perceptual_loss(extractor: FeatureExtractor, img: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Mean squared feature difference, summed over taps."""
    if img.shape != ref.shape:
        raise ValueError("perceptual loss needs equal-resolution inputs")
    total = None
    for fa, fb in zip(extractor(img), extractor(ref)):
        term = (fa - fb).pow(2).mean()
        total = term if total is None else total + term
    return total


def adversarial_generator_loss(disc, fake: torch.Tensor) -> torch.Tensor:
    return F.softplus(-disc(fake)).mean()


def r1_penalty(disc, real: torch.Tensor) -> torch.Tensor:
    """Squared gradient norm of the discriminator at the real images."""
    real = real.detach().requires_grad_(True)
    logits = disc(real)
    (grad,) = torch.autograd.grad(logits.sum(), real, create_graph=True)
    return grad.pow(2).reshape(grad.shape[0], -1).sum(dim=1).mean()


def adversarial_losses(disc, real: torch.Tensor, fake: torch.Tensor, compute_r1: bool = True):
    """Non-saturating logistic GAN losses: (L_G, L_D, r1)."""
    if real.shape[-2:] != fake.shape[-2:]:
        raise ValueError("real/fake resolution mismatch")
    l_g = adversarial_generator_loss(disc, fake)
    l_d = F.softplus(-disc(real)).mean() + F.softplus(disc(fake)).mean()
    r1 = r1_penalty(disc, real) if compute_r1 else torch.zeros((), dtype=real.dtype)
    return l_g, l_d, r1


def adaptation_weight_norm(blocks) -> torch.Tensor:
    """Global L2 norm over the adaptation blocks' conv weights only."""
    total = None
    for block in blocks:
        sq = block.conv_weight.pow(2).sum()
        total = sq if total is None else total + sq
    if total is None:
        return torch.zeros(())
    return total.sqrt()


@dataclass
class LossTerms:
    """Raw (unweighted) scalar terms feeding a stage objective."""

    adv_g: torch.Tensor
    adv_d: torch.Tensor
    r1: torch.Tensor
    contextual: torch.Tensor
    feature_match: torch.Tensor
    identity: torch.Tensor
    perceptual: torch.Tensor | None = None
    weight_norm: torch.Tensor | None = None


def stage_objective(stage, terms: LossTerms, weights: LossWeights, r1_weight: float = 1.0):
    """Combine raw terms into (generator total, discriminator total).

    Stage II additionally requires the perceptual and weight-norm terms.
    The discriminator total never depends on the style/content weights.
    """
    stage_id = getattr(stage, "value", stage)
    if stage_id not in ("I", "II"):
        raise ValueError(f"unknown stage {stage!r}")
    l_g = (
        weights.adv * terms.adv_g
        + weights.contextual * terms.contextual
        + weights.feature_match * terms.feature_match
        + weights.identity * terms.identity
    )
    if stage_id == "II":
        if terms.perceptual is None or terms.weight_norm is None:
            raise ValueError("stage II needs perceptual and weight_norm terms")
        l_g = l_g + weights.perceptual * terms.perceptual + weights.reg * terms.weight_norm
    l_d = terms.adv_d + r1_weight * terms.r1
    return l_g, l_d
