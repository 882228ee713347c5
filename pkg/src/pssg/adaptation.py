"""Attention-based style adaptation of the frozen generator's fine layers.

Each fine resolution level owns one adaptation block. A block computes an
attention map between the (channel-normalized) content and style latent
stacks, mixes the style value vectors into an attention-weighted segment for
its layer, turns that segment into per-channel scale parameters through a
learned affine layer, and applies them as a demodulated weight-modulated
convolution over the content features. The result is blended into the frozen
feature stream through a scalar gate that starts closed, so an untrained
adapter reproduces the base generator exactly.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .generator import SynthesisNetwork, modulated_conv2d
from .latent import LatentCode, LatentSpace


def normalize_segments(segments: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Standardize each latent channel across the segment axis.

    Treats a (..., L, d) stack as d channels observed at L positions; every
    channel comes out with mean 0 and std 1 across the positions.
    """
    if segments.shape[-2] < 2:
        raise ValueError("channel normalization needs at least 2 segments")
    mu = segments.mean(dim=-2, keepdim=True)
    sd = segments.std(dim=-2, keepdim=True, unbiased=False)
    return (segments - mu) / (sd + eps)


def normalize_latent(code: LatentCode) -> LatentCode:
    return LatentCode(code.space, normalize_segments(code.segments))


def _segments(code) -> torch.Tensor:
    return code.segments if isinstance(code, LatentCode) else code


class AdaptBlock(nn.Module):
    """Attentive affine transform block for one fine conv layer.

    Holds the q/k/v segment projections, the affine layer mapping the
    attention-weighted segment to per-channel modulation scales, a trainable
    conv at the layer's shape, and the scalar fusion gate (initialized to 0).
    With `predict_shift` the affine layer also emits per-channel shifts,
    doubling its output width; the default forward path folds the scales
    into the conv weights and drops the shift entirely.
    """

    def __init__(
        self,
        latent_dim: int,
        channels: int,
        layer_index: int,
        attn_dim: Optional[int] = None,
        kernel_size: int = 3,
        predict_shift: bool = False,
    ):
        super().__init__()
        attn_dim = attn_dim or max(1, latent_dim // 4)
        self.latent_dim = latent_dim
        self.attn_dim = attn_dim
        self.channels = channels
        self.layer_index = layer_index
        self.predict_shift = predict_shift
        self.q_proj = nn.Linear(latent_dim, attn_dim)
        self.k_proj = nn.Linear(latent_dim, attn_dim)
        self.v_proj = nn.Linear(latent_dim, latent_dim)
        self.affine = nn.Linear(latent_dim, channels * (2 if predict_shift else 1))
        with torch.no_grad():
            self.affine.bias.zero_()
            self.affine.bias[:channels].fill_(1.0)  # scale output starts at identity
        self.conv_weight = nn.Parameter(
            torch.randn(channels, channels, kernel_size, kernel_size)
            * math.sqrt(2.0 / (channels * kernel_size**2))
        )
        self.conv_bias = nn.Parameter(torch.zeros(channels))
        self.gate = nn.Parameter(torch.zeros(()))

    def attention(self, w_c: torch.Tensor, w_s: torch.Tensor) -> torch.Tensor:
        """(B, L, d) x (B, L, d) -> (B, L, L) row-stochastic attention."""
        q = self.q_proj(normalize_segments(w_c))
        k = self.k_proj(normalize_segments(w_s))
        logits = q @ k.transpose(-2, -1)
        if not torch.isfinite(logits).all():
            raise FloatingPointError("non-finite attention logits")
        return torch.softmax(logits, dim=-1)

    def weighted_segment(self, w_c: torch.Tensor, w_s: torch.Tensor) -> torch.Tensor:
        """Attention-weighted style segment for this block's layer, (B, d)."""
        attn = self.attention(w_c, w_s)
        values = self.v_proj(w_s)
        return (attn @ values)[:, self.layer_index]

    def modulation(self, w_c: torch.Tensor, w_s: torch.Tensor):
        """Affine parameters (scale, shift-or-None) from the weighted segment."""
        y = self.affine(self.weighted_segment(w_c, w_s))
        if self.predict_shift:
            return y[:, : self.channels], y[:, self.channels :]
        return y, None

    def forward(self, features: torch.Tensor, w_c: torch.Tensor, w_s: torch.Tensor) -> torch.Tensor:
        """Adapt the content features entering this block's conv layer.

        The affine scales are folded into the conv weights (modulation +
        demodulation), so no explicit normalization or shift is applied.
        """
        squeeze = features.ndim == 3
        if squeeze:
            features = features[None]
        if w_c.ndim == 2:
            w_c = w_c[None]
        if w_s.ndim == 2:
            w_s = w_s[None]
        scale, _ = self.modulation(w_c, w_s)
        out = modulated_conv2d(features, self.conv_weight, scale, demodulate=True)
        out = F.leaky_relu(out + self.conv_bias[:, None, None], 0.2) * math.sqrt(2.0)
        return out[0] if squeeze else out


def compute_qkv(block: AdaptBlock, w_c, w_s):
    """Spec-shaped projections: Q, K are (attn_dim, L); V is (d, L).

    Q and K come from channel-normalized codes; V from the raw style code.
    """
    c = _segments(w_c)
    s = _segments(w_s)
    if c.shape != s.shape:
        raise ValueError(f"content/style shape mismatch: {tuple(c.shape)} vs {tuple(s.shape)}")
    if c.shape[-1] != block.latent_dim:
        raise ValueError(f"block expects latent dim {block.latent_dim}, got {c.shape[-1]}")
    q = block.q_proj(normalize_segments(c))
    k = block.k_proj(normalize_segments(s))
    v = block.v_proj(s)
    return q.T, k.T, v.T


def attention_map(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of Q^T K; rows index content segments."""
    if q.shape[0] != k.shape[0]:
        raise ValueError("Q and K must share the projection dimension")
    logits = q.T @ k
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite attention logits")
    return torch.softmax(logits, dim=-1)


def attention_weighted_segment(values: torch.Tensor, attn: torch.Tensor, index: int) -> torch.Tensor:
    """Column `index` of V A^T: the convex mix sum_j A[i, j] * V[:, j]."""
    num_segments = attn.shape[0]
    if not 0 <= index < num_segments:
        raise ValueError(f"segment index {index} out of range for L={num_segments}")
    return (values @ attn.T)[:, index]


def attentive_affine(block: AdaptBlock, x: torch.Tensor):
    """Affine parameters learned from an attention-weighted segment."""
    if x.shape != (block.latent_dim,):
        raise ValueError(f"expected a ({block.latent_dim},) segment, got {tuple(x.shape)}")
    y = block.affine(x)
    if block.predict_shift:
        return y[: block.channels], y[block.channels :]
    return y, None


def adaptive_normalize(
    features: torch.Tensor,
    scale: torch.Tensor,
    shift: Optional[torch.Tensor] = None,
    eps: float = 1e-8,
) -> torch.Tensor:
    """Standardize each channel spatially, then apply per-channel scale/shift."""
    squeeze = features.ndim == 3
    if squeeze:
        features = features[None]
    if scale.ndim == 1:
        scale = scale[None]
    if scale.shape[1] != features.shape[1]:
        raise ValueError(f"scale has {scale.shape[1]} channels, features have {features.shape[1]}")
    mu = features.mean(dim=(2, 3), keepdim=True)
    sd = features.std(dim=(2, 3), keepdim=True, unbiased=False)
    out = scale[:, :, None, None] * (features - mu) / (sd + eps)
    if shift is not None:
        if shift.ndim == 1:
            shift = shift[None]
        out = out + shift[:, :, None, None]
    return out[0] if squeeze else out


def adapt_block_forward(block: AdaptBlock, features: torch.Tensor, w_c, w_s) -> torch.Tensor:
    """Full block forward on a single sample or a batch."""
    return block(features, _segments(w_c), _segments(w_s))


def fuse(frozen: torch.Tensor, adapted: torch.Tensor, gate) -> torch.Tensor:
    """Blend adapted features into the frozen stream: frozen + gate * adapted."""
    if frozen.shape != adapted.shape:
        raise ValueError(f"shape mismatch: {tuple(frozen.shape)} vs {tuple(adapted.shape)}")
    return frozen + gate * adapted


class StylizedGenerator(nn.Module):
    """g': the frozen synthesis network plus adaptation blocks at fine layers."""

    def __init__(self, synthesis: SynthesisNetwork, blocks):
        super().__init__()
        self.synthesis = synthesis
        self.blocks = nn.ModuleList(blocks)
        self._by_layer = {int(b.layer_index): i for i, b in enumerate(self.blocks)}
        specs = {s.style_index for s in synthesis.conv_specs}
        for index in self._by_layer:
            if index not in specs:
                raise ValueError(f"block layer index {index} is not a conv layer of g")

    def forward(
        self,
        w_content: torch.Tensor,
        w_style: torch.Tensor,
        noise_mode: str = "zero",
        noise_generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        squeeze = w_content.ndim == 2
        if squeeze:
            w_content = w_content[None]
        if w_style.ndim == 2:
            w_style = w_style[None].expand(w_content.shape[0], -1, -1)
        if w_style.shape[0] != w_content.shape[0]:
            raise ValueError("content/style batch mismatch")

        def adapter(index: int, conv_in: torch.Tensor, frozen_out: torch.Tensor) -> torch.Tensor:
            slot = self._by_layer.get(index)
            if slot is None:
                return frozen_out
            block = self.blocks[slot]
            adapted = block(conv_in, w_content, w_style)
            return fuse(frozen_out, adapted, block.gate)

        img = self.synthesis(
            w_content, noise_mode=noise_mode, noise_generator=noise_generator, adapter=adapter
        )
        return img[0] if squeeze else img


def build_adaptation_blocks(
    synthesis: SynthesisNetwork,
    attn_dim: Optional[int] = None,
    predict_shift: bool = False,
    seed: int = 0,
) -> list[AdaptBlock]:
    """One block per fine level, at that level's final conv layer."""
    torch.manual_seed(seed)
    blocks = []
    for spec in synthesis.adaptation_layer_specs():
        blocks.append(
            AdaptBlock(
                synthesis.latent_dim,
                spec.out_channels,
                spec.style_index,
                attn_dim=attn_dim,
                predict_shift=predict_shift,
            )
        )
    return blocks


def stylized_synthesize(
    gprime: StylizedGenerator,
    w_content: LatentCode,
    w_style: LatentCode,
    noise_mode: str = "zero",
    noise_seed: int = 0,
) -> torch.Tensor:
    """Render one content/style W+ pair to a (3, R, R) image in [-1, 1]."""
    for code, name in ((w_content, "content"), (w_style, "style")):
        if code.space != LatentSpace.WPLUS:
            raise ValueError(f"{name} code must be W+, got {code.space.name}")
        if code.num_segments != gprime.synthesis.num_style_inputs:
            raise ValueError(
                f"{name} code has {code.num_segments} segments, "
                f"generator expects {gprime.synthesis.num_style_inputs}"
            )
    gen = None
    if noise_mode == "seeded":
        gen = torch.Generator().manual_seed(int(noise_seed))
    with torch.no_grad():
        return gprime(w_content.segments, w_style.segments, noise_mode=noise_mode, noise_generator=gen)
