"""Pyramid scene transformer: multi-scale global context plus adaptive bins.

The deepest backbone feature is processed by three parallel paths. Each
path embeds the grid into fixed-size tokens with an adaptive embedding
convolution (stride and kernel chosen so the output grid size is hit
exactly, with no padding), adds a learned positional encoding, and runs
a small pre-norm transformer encoder. Path 1 keeps the full grid
resolution and carries one extra learned token whose transformed value
parameterizes the depth-bin widths; paths 2 and 3 work at half and
quarter resolution and are upsampled back before the three grids are
concatenated and compressed to a 16-channel fused feature.

Blocks are pre-norm with no terminal LayerNorm, so a transformer whose
projection weights are all zero is exactly the identity on its input
sequence — a property the tests rely on.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .bins import BinPartition, DepthRange, bin_centers, normalize_bin_widths
from .errors import ConfigError, ValidationError

# Channel count of the fused multi-path feature handed to the decoder.
FUSED_CHANNELS = 16

# Default token width of the path embeddings.
DEFAULT_EMBED_DIM = 32


@dataclass(frozen=True)
class AecGeometry:
    """Stride/kernel pair that maps an input grid onto an exact output grid.

    stride = floor(in / out) per axis and kernel = in - stride*(out - 1),
    so the sliding window emits exactly `out` cells, the last window ends
    on the final input cell, and no padding is ever needed.
    """

    in_h: int
    in_w: int
    out_h: int
    out_w: int
    stride_y: int
    stride_x: int
    kernel_h: int
    kernel_w: int

    def __post_init__(self) -> None:
        for name in ("in_h", "in_w", "out_h", "out_w", "stride_y", "stride_x", "kernel_h", "kernel_w"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if self.stride_y != self.in_h // self.out_h or self.stride_x != self.in_w // self.out_w:
            raise ValidationError("strides must be floor(in / out)")
        if self.kernel_h != self.in_h - self.stride_y * (self.out_h - 1):
            raise ValidationError("kernel_h must be in_h - stride_y*(out_h - 1)")
        if self.kernel_w != self.in_w - self.stride_x * (self.out_w - 1):
            raise ValidationError("kernel_w must be in_w - stride_x*(out_w - 1)")
        got_h = (self.in_h - self.kernel_h) // self.stride_y + 1
        got_w = (self.in_w - self.kernel_w) // self.stride_x + 1
        if (got_h, got_w) != (self.out_h, self.out_w):
            raise ValidationError("sliding window does not reproduce the output grid")


def compute_aec_geometry(in_h: int, in_w: int, out_h: int, out_w: int) -> AecGeometry:
    """Derive the adaptive embedding stride and kernel for a target grid."""
    if min(in_h, in_w, out_h, out_w) < 1:
        raise ValidationError("grid dimensions must be positive")
    if out_h > in_h or out_w > in_w:
        raise ValidationError(
            f"output grid {out_h}x{out_w} exceeds input grid {in_h}x{in_w}"
        )
    stride_y, stride_x = in_h // out_h, in_w // out_w
    kernel_h = in_h - stride_y * (out_h - 1)
    kernel_w = in_w - stride_x * (out_w - 1)
    return AecGeometry(in_h, in_w, out_h, out_w, stride_y, stride_x, kernel_h, kernel_w)


class AdaptiveEmbedding(nn.Module):
    """Padding-free convolution that lands exactly on a target grid size."""

    def __init__(self, in_channels: int, embed_dim: int, geometry: AecGeometry):
        super().__init__()
        self.geometry = geometry
        self.proj = nn.Conv2d(
            in_channels,
            embed_dim,
            kernel_size=(geometry.kernel_h, geometry.kernel_w),
            stride=(geometry.stride_y, geometry.stride_x),
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ValidationError("expected a (B, C, H, W) feature grid")
        if x.shape[-2:] != (self.geometry.in_h, self.geometry.in_w):
            raise ValidationError(
                f"feature grid {tuple(x.shape[-2:])} does not match embedding "
                f"geometry {(self.geometry.in_h, self.geometry.in_w)}"
            )
        return self.proj(x)


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product attention over a token sequence."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigError(f"embed dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # each (b, heads, t, hd)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        out = attn.softmax(dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, t, c)
        return self.proj(out)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block: x + attn(LN(x)), then x + mlp(LN(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TransformerEncoder(nn.Module):
    """Stack of pre-norm blocks with no terminal normalization."""

    def __init__(self, dim: int, depth: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(dim, num_heads, mlp_ratio) for _ in range(depth))

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


@dataclass
class PathOutput:
    """One path's transformed token grid plus, for path 1, the bin token."""

    path_index: int
    grid: Tensor
    special: Tensor | None

    def __post_init__(self) -> None:
        if (self.special is not None) != (self.path_index == 1):
            raise ValidationError("the extra bin token exists exactly on path 1")


def path_target_hw(in_h: int, in_w: int, path_index: int) -> tuple[int, int]:
    """Token-grid size for a path: the input grid floor-divided by 2^(j-1).

    Targets that round to zero on tiny inputs are clamped to 1 with a
    warning, so the module stays usable at toy resolutions.
    """
    if path_index not in (1, 2, 3):
        raise ValidationError("path index must be 1, 2, or 3")
    factor = 2 ** (path_index - 1)
    th, tw = in_h // factor, in_w // factor
    if th < 1 or tw < 1:
        warnings.warn(
            f"path {path_index} target {th}x{tw} clamped to at least 1x1 "
            f"for input grid {in_h}x{in_w}",
            stacklevel=2,
        )
        th, tw = max(th, 1), max(tw, 1)
    return th, tw


class ScenePath(nn.Module):
    """One pyramid path: adaptive embedding, positions, transformer."""

    def __init__(
        self,
        path_index: int,
        in_channels: int,
        input_hw: tuple[int, int],
        embed_dim: int = DEFAULT_EMBED_DIM,
        depth: int = 2,
        num_heads: int = 4,
    ):
        super().__init__()
        self.path_index = path_index
        self.target_hw = path_target_hw(*input_hw, path_index)
        geometry = compute_aec_geometry(*input_hw, *self.target_hw)
        self.embed = AdaptiveEmbedding(in_channels, embed_dim, geometry)
        tokens = self.target_hw[0] * self.target_hw[1]
        self.has_special = path_index == 1
        if self.has_special:
            self.special_token = nn.Parameter(torch.zeros(embed_dim))
            tokens += 1
        self.pos_embed = nn.Parameter(torch.zeros(tokens, embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        if self.has_special:
            nn.init.trunc_normal_(self.special_token, std=0.02)
        self.encoder = TransformerEncoder(embed_dim, depth, num_heads)

    def forward(self, x: Tensor) -> PathOutput:
        tokens = self.embed(x)  # (B, C_e, th, tw)
        b, c, th, tw = tokens.shape
        seq = tokens.flatten(2).transpose(1, 2)  # row-major (B, T, C_e)
        special = None
        if self.has_special:
            lead = self.special_token.expand(b, 1, c)
            seq = torch.cat([lead, seq], dim=1)
        seq = self.encoder(seq + self.pos_embed)
        if self.has_special:
            special, seq = seq[:, 0], seq[:, 1:]
        grid = seq.transpose(1, 2).reshape(b, c, th, tw)
        return PathOutput(self.path_index, grid, special)


@dataclass
class PstOutput:
    """Fused context feature plus the per-image bin widths and centers."""

    fused_feature: Tensor
    widths: Tensor
    centers: Tensor
    depth_range: DepthRange

    def __post_init__(self) -> None:
        if self.fused_feature.shape[-3] != FUSED_CHANNELS:
            raise ValidationError(f"fused feature must have {FUSED_CHANNELS} channels")
        if self.widths.shape != self.centers.shape:
            raise ValidationError("widths and centers must share a shape")

    def partition(self, index: int = 0) -> BinPartition:
        """Domain-type view of one image's bins (detached, 64-bit)."""
        w = self.widths[index].detach().cpu().double().numpy()
        c = self.centers[index].detach().cpu().double().numpy()
        return BinPartition(w / w.sum(), c, self.depth_range)


class PyramidSceneTransformer(nn.Module):
    """Three transformer paths over the deepest feature, fused to 16 channels.

    The extra token of path 1 is mapped by a two-layer MLP to raw bin
    widths, which are normalized and converted to bin centers over the
    configured depth range.
    """

    def __init__(
        self,
        in_channels: int,
        input_hw: tuple[int, int],
        depth_range: DepthRange,
        num_bins: int = 64,
        embed_dim: int = DEFAULT_EMBED_DIM,
        depth: int = 2,
        num_heads: int = 4,
    ):
        super().__init__()
        if num_bins < 1:
            raise ConfigError("num_bins must be >= 1")
        self.input_hw = tuple(input_hw)
        self.depth_range = depth_range
        self.num_bins = num_bins
        self.paths = nn.ModuleList(
            ScenePath(j, in_channels, self.input_hw, embed_dim, depth, num_heads)
            for j in (1, 2, 3)
        )
        self.fuse = nn.Sequential(
            nn.Conv2d(3 * embed_dim, embed_dim, kernel_size=3, padding=1),
            nn.GroupNorm(1, embed_dim),
            nn.SiLU(),
            nn.Conv2d(embed_dim, embed_dim, kernel_size=3, padding=1),
            nn.GroupNorm(1, embed_dim),
            nn.SiLU(),
            nn.Conv2d(embed_dim, FUSED_CHANNELS, kernel_size=1),
        )
        self.bin_head = nn.Sequential(
            nn.Linear(embed_dim, embed_dim),
            nn.GELU(),
            nn.Linear(embed_dim, num_bins),
        )

    def forward(self, x: Tensor) -> PstOutput:
        if x.ndim != 4:
            raise ValidationError("expected a (B, C, H, W) feature grid")
        if tuple(x.shape[-2:]) != self.input_hw:
            raise ValidationError(
                f"feature grid {tuple(x.shape[-2:])} does not match the module's "
                f"configured input {self.input_hw}"
            )
        outputs = [path(x) for path in self.paths]
        full_hw = outputs[0].grid.shape[-2:]
        grids = [outputs[0].grid]
        for out in outputs[1:]:
            grids.append(
                F.interpolate(out.grid, size=full_hw, mode="bilinear", align_corners=False)
            )
        fused = self.fuse(torch.cat(grids, dim=1))
        raw = self.bin_head(outputs[0].special)
        widths = normalize_bin_widths(raw)
        centers = bin_centers(widths, self.depth_range)
        return PstOutput(fused, widths, centers, self.depth_range)
