"""End-to-end depth network: backbone, skip compression, context, decoder.

The forward pass follows an encoder/decoder layout. A five-stage
stride-2 backbone produces a feature pyramid; the four shallower levels
are compressed to 16 channels each and used as decoder skips, while the
deepest level feeds the pyramid scene transformer, which returns both
the fused context feature and the image-adaptive depth bins. The decoder
upsamples back to half resolution in four stages (upsample, add skip,
three-convolution residual fusion), a 1x1 head emits per-pixel bin
logits, and the softmax probabilities are combined with the bin centers
into depth, which is bilinearly upsampled to the input resolution.

The backbone is deliberately small and swappable: anything satisfying
`FeatureExtractor` (five levels, ceil-halving resolutions) can replace
`ToyBackbone`, e.g. a pretrained encoder at real scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .bins import (
    BinPartition,
    BinProbabilityMap,
    DepthMap,
    DepthRange,
    bin_centers,
    combine,
)
from .errors import ConfigError, ValidationError
from .pst import FUSED_CHANNELS, PyramidSceneTransformer

# Backbone stage widths, a scaled-down echo of common efficient encoders.
DEFAULT_CHANNELS = (16, 24, 40, 80, 160)

# Smallest supported input side: five halvings must stay meaningful.
MIN_INPUT_SIDE = 32


def pyramid_sizes(h: int, w: int) -> list[tuple[int, int]]:
    """Spatial dims of the five backbone levels under ceil-halving."""
    sizes = []
    for _ in range(5):
        h, w = math.ceil(h / 2), math.ceil(w / 2)
        sizes.append((h, w))
    return sizes


@dataclass(frozen=True)
class NetworkConfig:
    """Hyperparameters of the depth estimator, including ablation switches."""

    input_hw: tuple[int, int] = (64, 64)
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    num_bins: int = 64
    embed_dim: int = 32
    depth_range: DepthRange = field(default_factory=lambda: DepthRange(0.0, 10.0))
    use_pst: bool = True
    transformer_depth: int = 2
    transformer_heads: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 5 or any(c < 1 for c in self.channels):
            raise ConfigError("channel plan must list five positive widths")
        if min(self.input_hw) < MIN_INPUT_SIDE:
            raise ConfigError(f"input sides must be >= {MIN_INPUT_SIDE}")
        if self.num_bins < 1 or self.embed_dim < 1:
            raise ConfigError("num_bins and embed_dim must be >= 1")
        if self.transformer_depth < 1 or self.transformer_heads < 1:
            raise ConfigError("transformer depth and heads must be >= 1")
        if self.embed_dim % self.transformer_heads != 0:
            raise ConfigError("embed_dim must be divisible by transformer_heads")

    @property
    def bottleneck_hw(self) -> tuple[int, int]:
        return pyramid_sizes(*self.input_hw)[-1]

    def to_dict(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "channels": list(self.channels),
            "num_bins": self.num_bins,
            "embed_dim": self.embed_dim,
            "depth_range": [self.depth_range.d_min, self.depth_range.d_max],
            "use_pst": self.use_pst,
            "transformer_depth": self.transformer_depth,
            "transformer_heads": self.transformer_heads,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        try:
            lo, hi = data["depth_range"]
            return cls(
                input_hw=tuple(data["input_hw"]),
                channels=tuple(data["channels"]),
                num_bins=int(data["num_bins"]),
                embed_dim=int(data["embed_dim"]),
                depth_range=DepthRange(float(lo), float(hi)),
                use_pst=bool(data["use_pst"]),
                transformer_depth=int(data.get("transformer_depth", 2)),
                transformer_heads=int(data.get("transformer_heads", 4)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad network config record: {exc}") from exc


@dataclass
class FeaturePyramid:
    """The five backbone levels, shallowest (half resolution) first."""

    levels: tuple[Tensor, ...]

    def __post_init__(self) -> None:
        if len(self.levels) != 5:
            raise ValidationError("a feature pyramid has exactly five levels")
        for prev, cur in zip(self.levels, self.levels[1:]):
            ph, pw = prev.shape[-2:]
            if tuple(cur.shape[-2:]) != (math.ceil(ph / 2), math.ceil(pw / 2)):
                raise ValidationError("each pyramid level must ceil-halve the previous one")

    @property
    def deepest(self) -> Tensor:
        return self.levels[-1]


class FeatureExtractor(nn.Module):
    """Interface for pluggable encoders: five ceil-halving feature levels."""

    @property
    def channels(self) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, image: Tensor) -> FeaturePyramid:
        raise NotImplementedError


def _conv_stage(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1),
        nn.GroupNorm(1, out_ch),
        nn.SiLU(),
    )


class ToyBackbone(FeatureExtractor):
    """Five stride-2 conv stages; stage i ceil-halves the running resolution."""

    def __init__(self, channels: tuple[int, ...] = DEFAULT_CHANNELS):
        super().__init__()
        if len(channels) != 5:
            raise ConfigError("backbone needs a five-entry channel plan")
        self._channels = tuple(channels)
        chain = (3, *channels)
        self.stages = nn.ModuleList(_conv_stage(a, b) for a, b in zip(chain, chain[1:]))

    @property
    def channels(self) -> tuple[int, ...]:
        return self._channels

    def forward(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValidationError("expected a (B, 3, H, W) image batch")
        if min(image.shape[-2:]) < MIN_INPUT_SIDE:
            raise ValidationError(
                f"image sides must be >= {MIN_INPUT_SIDE} to survive five halvings"
            )
        levels = []
        x = image
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return FeaturePyramid(tuple(levels))


class FeatureCompression(nn.Module):
    """Skip-connection compressor: a 3x3 refinement then a 1x1 projection.

    The 3x3 convolution sits on a residual branch, so zeroing it reduces
    the block to the bare 1x1 channel projection.
    """

    def __init__(self, in_channels: int, out_channels: int = FUSED_CHANNELS):
        super().__init__()
        self.refine = nn.Conv2d(in_channels, in_channels, kernel_size=3, padding=1)
        self.act = nn.SiLU()
        self.project = nn.Conv2d(in_channels, out_channels, kernel_size=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.project(x + self.act(self.refine(x)))


class ResidualFusion(nn.Module):
    """Identity skip around three 3x3 convolutions at constant width."""

    def __init__(self, channels: int = FUSED_CHANNELS):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            nn.GroupNorm(1, channels),
            nn.SiLU(),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            nn.GroupNorm(1, channels),
            nn.SiLU(),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
        )

    def forward(self, x: Tensor) -> Tensor:
        return x + self.body(x)


class Decoder(nn.Module):
    """Four upsample-add-fuse stages from the bottleneck to half resolution."""

    def __init__(self, channels: int = FUSED_CHANNELS, stages: int = 4):
        super().__init__()
        self.fusions = nn.ModuleList(ResidualFusion(channels) for _ in range(stages))

    def forward(self, fused: Tensor, skips: list[Tensor]) -> Tensor:
        if len(skips) != len(self.fusions):
            raise ValidationError(f"decoder expects {len(self.fusions)} skip features")
        x = fused
        for fusion, skip in zip(self.fusions, skips):
            if skip.shape[1] != x.shape[1]:
                raise ValidationError("skip channel width must match the decoder width")
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = fusion(x + skip)
        return x


@dataclass
class DepthPrediction:
    """Batched network output with per-image domain-type accessors."""

    depth: Tensor
    probs: Tensor
    widths: Tensor
    centers: Tensor
    depth_range: DepthRange

    def depth_map(self, index: int = 0) -> DepthMap:
        return DepthMap(self.depth[index].detach().cpu().double().numpy())

    def probability_map(self, index: int = 0) -> BinProbabilityMap:
        return BinProbabilityMap.from_tensor(self.probs[index])

    def partition(self, index: int = 0) -> BinPartition:
        w = self.widths[index].detach().cpu().double().numpy()
        c = self.centers[index].detach().cpu().double().numpy()
        return BinPartition(w / w.sum(), c, self.depth_range)


class DepthEstimator(nn.Module):
    """Full network: pyramid encoder, context bottleneck, decoder, bin head."""

    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = config or NetworkConfig()
        cfg = self.config
        self.backbone = ToyBackbone(cfg.channels)
        self.skip_compress = nn.ModuleList(
            FeatureCompression(c) for c in cfg.channels[:4]
        )
        if cfg.use_pst:
            self.pst = PyramidSceneTransformer(
                in_channels=cfg.channels[4],
                input_hw=cfg.bottleneck_hw,
                depth_range=cfg.depth_range,
                num_bins=cfg.num_bins,
                embed_dim=cfg.embed_dim,
                depth=cfg.transformer_depth,
                num_heads=cfg.transformer_heads,
            )
            self.bottleneck = None
        else:
            self.pst = None
            self.bottleneck = nn.Sequential(
                nn.Conv2d(cfg.channels[4], cfg.embed_dim, kernel_size=3, padding=1),
                nn.GroupNorm(1, cfg.embed_dim),
                nn.SiLU(),
                nn.Conv2d(cfg.embed_dim, FUSED_CHANNELS, kernel_size=1),
            )
        self.decoder = Decoder()
        self.head = nn.Conv2d(FUSED_CHANNELS, cfg.num_bins, kernel_size=1)

    def forward(self, image: Tensor) -> DepthPrediction:
        cfg = self.config
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValidationError("expected a (B, 3, H, W) image batch")
        with torch.no_grad():
            if not torch.isfinite(image).all() or image.min() < 0 or image.max() > 1:
                raise ValidationError("image values must be finite and within [0, 1]")
        if cfg.use_pst and tuple(image.shape[-2:]) != cfg.input_hw:
            raise ValidationError(
                f"this network was built for {cfg.input_hw} inputs, got "
                f"{tuple(image.shape[-2:])} (positional encodings are size-bound)"
            )

        pyramid = self.backbone(image)
        if self.pst is not None:
            context = self.pst(pyramid.deepest)
            fused, widths, centers = context.fused_feature, context.widths, context.centers
        else:
            fused = self.bottleneck(pyramid.deepest)
            widths = torch.full(
                (image.shape[0], cfg.num_bins),
                1.0 / cfg.num_bins,
                dtype=fused.dtype,
                device=fused.device,
            )
            centers = bin_centers(widths, cfg.depth_range)

        skips = [
            compress(level)
            for compress, level in zip(reversed(self.skip_compress), reversed(pyramid.levels[:4]))
        ]
        decoded = self.decoder(fused, skips)
        logits = self.head(decoded)
        probs = torch.softmax(logits, dim=1)
        depth_half = combine(probs, centers)
        depth = F.interpolate(
            depth_half[:, None], size=image.shape[-2:], mode="bilinear", align_corners=False
        )[:, 0]
        # interpolation of a convex combination stays inside [c_1, c_N];
        # clamp only irons out float rounding at the boundary
        lo = centers[:, 0, None, None].detach()
        hi = centers[:, -1, None, None].detach()
        depth = torch.clamp(depth, min=lo, max=hi)
        return DepthPrediction(depth, probs, widths, centers, cfg.depth_range)


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    """Total number of scalar parameters in a module."""
    return sum(
        p.numel() for p in module.parameters() if p.requires_grad or not trainable_only
    )


def predict_sample(model: DepthEstimator, image: np.ndarray):
    """Run one H x W x 3 image through the network, returning domain types.

    Returns (DepthMap at the input resolution, BinProbabilityMap at half
    resolution, BinPartition).
    """
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValidationError("expected an H x W x 3 image array")
    batch = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(batch)
    finally:
        model.train(was_training)
    return out.depth_map(0), out.probability_map(0), out.partition(0)
