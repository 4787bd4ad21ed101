"""Training objectives: scale-invariant pixel loss, bin-center losses, stages.

The objective has three terms. A scaled scale-invariant log loss drives
per-pixel accuracy, a bidirectional Chamfer loss pulls the predicted bin
centers toward the image's actual depth values, and a min-max loss pins
the outermost centers to the ground-truth depth extremes. Training runs
in two stages that reuse the same terms with different coefficients and
pixel weights: a local stage (uniform pixel weights, no min-max term)
followed by a global stage (depth-related pixel weights that emphasize
pixels far from the median depth, min-max term on).

All loss functions accept either torch tensors — `(H, W)` or batched
`(B, H, W)`, keeping autograd intact — or `DepthMap` instances, and
return scalar tensors. Statistics that are per-image by definition
(median, extremes, the Chamfer target set) are computed per image and
averaged over the batch; the pixel loss pools valid pixels across the
whole batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .bins import DepthMap
from .errors import ValidationError

# Stabilizer added under the square root of the pixel loss; the result is
# shifted by -sqrt(EPS) so a perfect prediction still scores exactly 0.
SSI_EPS = 1e-12

# Largest number of ground-truth depth values fed to the Chamfer loss per
# image; larger images are subsampled uniformly with a fixed seed.
CHAMFER_MAX_POINTS = 10_000
CHAMFER_SEED = 0

WEIGHT_MODES = ("zero", "depth_related")


@dataclass(frozen=True)
class StageConfig:
    """Loss coefficients and pixel-weight mode for one training stage.

    total = alpha * pixel + beta * bins + gamma * minmax, with the pixel
    term's weights lambda identically zero (`weight_mode="zero"`) or the
    depth-related map scaled by ``v`` (`weight_mode="depth_related"`).
    ``u`` controls how much of the squared-mean term the pixel loss
    subtracts (u=1 is fully scale-invariant).
    """

    alpha: float
    beta: float
    gamma: float
    u: float
    v: float = 0.0
    weight_mode: str = "zero"

    def __post_init__(self) -> None:
        coeffs = (self.alpha, self.beta, self.gamma, self.u, self.v)
        if not all(np.isfinite(c) and c >= 0 for c in coeffs):
            raise ValidationError("stage coefficients must be finite and >= 0")
        if not 0.0 <= self.u <= 1.0:
            raise ValidationError(f"u must lie in [0, 1], got {self.u}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValidationError(
                f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}"
            )


# The two published stages: local first (no min-max term, unweighted
# pixels), then global (min-max on, depth-related weights with v=1).
LOCAL_STAGE = StageConfig(alpha=10.0, beta=0.1, gamma=0.0, u=0.85, v=0.0, weight_mode="zero")
GLOBAL_STAGE = StageConfig(
    alpha=10.0, beta=0.1, gamma=0.1, u=0.85, v=1.0, weight_mode="depth_related"
)


@dataclass(frozen=True)
class PixelWeights:
    """Per-pixel emphasis map lambda for the pixel loss, bounded by [0, v]."""

    values: np.ndarray
    v: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2:
            raise ValidationError("pixel weights must be an H x W grid")
        if self.v < 0 or not np.isfinite(self.v):
            raise ValidationError("v must be finite and >= 0")
        if np.any(self.values < -1e-9) or np.any(self.values > self.v + 1e-9):
            raise ValidationError("pixel weights must lie in [0, v]")

    @classmethod
    def compute(cls, gt: DepthMap, v: float) -> "PixelWeights":
        lam = depth_related_weights(gt, v)
        return cls(lam.numpy(), v)


@dataclass(frozen=True)
class LossBreakdown:
    """Total objective plus the three raw (unscaled) terms for logging."""

    total: Tensor
    pixel: Tensor
    bins: Tensor
    minmax: Tensor

    def scalars(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "pixel": float(self.pixel.detach()),
            "bins": float(self.bins.detach()),
            "minmax": float(self.minmax.detach()),
        }


def _depth_and_mask(value, valid_mask, name: str) -> tuple[Tensor, Tensor]:
    """Coerce a DepthMap or tensor to (values, bool mask) tensors."""
    if isinstance(value, DepthMap):
        t = value.to_tensor(torch.float64)
        mask = value.mask_tensor()
    else:
        t = value if isinstance(value, Tensor) else torch.as_tensor(np.asarray(value, dtype=np.float64))
        mask = torch.ones_like(t, dtype=torch.bool)
    if valid_mask is not None:
        mask = torch.as_tensor(np.asarray(valid_mask)).to(torch.bool)
        if mask.shape != t.shape:
            raise ValidationError(f"{name} valid mask shape {tuple(mask.shape)} != {tuple(t.shape)}")
    if t.ndim not in (2, 3):
        raise ValidationError(f"{name} must be (H, W) or (B, H, W), got shape {tuple(t.shape)}")
    return t, mask


def _check_positive(values: Tensor, mask: Tensor, name: str) -> None:
    picked = values[mask]
    if picked.numel() == 0:
        raise ValidationError(f"{name} has no valid pixels")
    with torch.no_grad():
        if not torch.isfinite(picked).all() or not bool((picked > 0).all()):
            raise ValidationError(f"{name} must be finite and > 0 at every valid pixel")


def _centers_tensor(centers, name: str = "bin centers") -> Tensor:
    if isinstance(centers, Tensor):
        t = centers
    else:
        t = torch.as_tensor(np.asarray(centers, dtype=np.float64))
    if t.ndim not in (1, 2) or t.shape[-1] < 1:
        raise ValidationError(f"{name} must be (N,) or (B, N) with N >= 1")
    if not torch.isfinite(t).all():
        raise ValidationError(f"{name} must be finite")
    return t


def ssi_loss(pred, gt, *, u: float, weights=None, valid_mask=None) -> Tensor:
    """Scaled scale-invariant log loss over valid pixels.

    With h = (lambda + 1) * (log pred - log gt) per pixel, returns
    sqrt(mean(h^2) - u * mean(h)^2) over the N valid pixels. The radicand
    is clamped at zero and the square root is stabilized so the loss and
    its gradient stay finite (and exactly zero) at a perfect match.
    """
    pred_t, pred_mask = _depth_and_mask(pred, valid_mask, "pred")
    gt_t, gt_mask = _depth_and_mask(gt, valid_mask, "gt")
    if pred_t.shape != gt_t.shape:
        raise ValidationError("pred and gt must share a shape")
    mask = pred_mask & gt_mask
    if not 0.0 <= u <= 1.0:
        raise ValidationError(f"u must lie in [0, 1], got {u}")
    _check_positive(pred_t, mask, "pred")
    _check_positive(gt_t, mask, "gt")

    diff = torch.log(pred_t) - torch.log(gt_t)
    if weights is not None:
        if isinstance(weights, PixelWeights):
            weights = torch.as_tensor(weights.values)
        lam = weights.to(diff.dtype)
        if lam.shape != diff.shape:
            raise ValidationError("pixel weights must match the depth-map shape")
        diff = (lam + 1.0) * diff
    h = diff[mask]
    radicand = (h * h).mean() - u * h.mean() ** 2
    return torch.sqrt(radicand.clamp(min=0.0) + SSI_EPS) - SSI_EPS**0.5


def _chamfer_points(gt_vals: Tensor, max_points: int, seed: int) -> Tensor:
    if gt_vals.numel() > max_points:
        idx = np.random.default_rng(seed).choice(gt_vals.numel(), size=max_points, replace=False)
        gt_vals = gt_vals[torch.as_tensor(np.sort(idx))]
    return gt_vals


def chamfer_bin_loss(
    centers,
    gt,
    *,
    valid_mask=None,
    max_points: int = CHAMFER_MAX_POINTS,
    seed: int = CHAMFER_SEED,
) -> Tensor:
    """Bidirectional Chamfer distance between bin centers and gt depths.

    X is the multiset of valid ground-truth values of one image
    (subsampled to at most ``max_points`` with a fixed seed); the loss is
    sum_x min_i (x - c_i)^2 + sum_i min_x (x - c_i)^2. Batched inputs
    are scored per image and averaged.
    """
    c = _centers_tensor(centers)
    gt_t, mask = _depth_and_mask(gt, valid_mask, "gt")
    if gt_t.ndim == 2:
        gt_t, mask = gt_t[None], mask[None]
    if c.ndim == 1:
        c = c[None].expand(gt_t.shape[0], -1)
    if c.shape[0] != gt_t.shape[0]:
        raise ValidationError("centers batch size must match gt batch size")

    per_image = []
    for b in range(gt_t.shape[0]):
        x = gt_t[b][mask[b]]
        if x.numel() == 0:
            raise ValidationError("gt has no valid pixels")
        x = _chamfer_points(x.detach(), max_points, seed)
        sq = (x[:, None] - c[b][None, :]) ** 2
        per_image.append(sq.min(dim=1).values.sum() + sq.min(dim=0).values.sum())
    return torch.stack(per_image).mean()


def minmax_loss(centers, gt, *, valid_mask=None) -> Tensor:
    """Absolute gap between the outermost centers and the gt depth extremes.

    |c_first - min(gt)| + |c_last - max(gt)| per image, averaged over a
    batch. The kink of |.| uses subgradient 0, so a perfectly pinned
    center receives no gradient.
    """
    c = _centers_tensor(centers)
    gt_t, mask = _depth_and_mask(gt, valid_mask, "gt")
    if gt_t.ndim == 2:
        gt_t, mask = gt_t[None], mask[None]
    if c.ndim == 1:
        c = c[None].expand(gt_t.shape[0], -1)
    if c.shape[0] != gt_t.shape[0]:
        raise ValidationError("centers batch size must match gt batch size")

    per_image = []
    for b in range(gt_t.shape[0]):
        x = gt_t[b][mask[b]]
        if x.numel() == 0:
            raise ValidationError("gt has no valid pixels")
        x = x.detach()
        per_image.append((c[b][0] - x.min()).abs() + (c[b][-1] - x.max()).abs())
    return torch.stack(per_image).mean()


def depth_related_weights(gt, v: float, *, valid_mask=None) -> Tensor:
    """Per-pixel weights that grow from 0 at the median depth to v at the extremes.

    For pixels at or below the per-image median m: v * (m - g) / (m - min g);
    above it: v * (g - m) / (max g - m). The median is the lower median of
    the valid values, degenerate denominators yield 0 on that side, and
    invalid pixels get weight 0.
    """
    if v < 0 or not np.isfinite(v):
        raise ValidationError("v must be finite and >= 0")
    gt_t, mask = _depth_and_mask(gt, valid_mask, "gt")
    batched = gt_t.ndim == 3
    if not batched:
        gt_t, mask = gt_t[None], mask[None]
    _check_positive(gt_t, mask, "gt")
    gt_t = gt_t.detach()

    lam = torch.zeros_like(gt_t)
    for b in range(gt_t.shape[0]):
        vals = gt_t[b][mask[b]]
        med = vals.median()  # lower median for even counts
        lo, hi = vals.min(), vals.max()
        below = torch.zeros_like(gt_t[b])
        above = torch.zeros_like(gt_t[b])
        if med > lo:
            below = v * (med - gt_t[b]) / (med - lo)
        if hi > med:
            above = v * (gt_t[b] - med) / (hi - med)
        lam[b] = torch.where(gt_t[b] <= med, below, above) * mask[b]
    return lam if batched else lam[0]


def total_loss(pred, gt, centers, stage: StageConfig, *, valid_mask=None) -> LossBreakdown:
    """Full two-stage objective: alpha*pixel + beta*bins + gamma*minmax.

    The pixel weights come from ``stage.weight_mode``: identically zero,
    or the depth-related map with the stage's v. Returns each raw term
    alongside the weighted total.
    """
    if stage.weight_mode == "depth_related":
        weights = depth_related_weights(gt, stage.v, valid_mask=valid_mask)
    else:
        weights = None
    pixel = ssi_loss(pred, gt, u=stage.u, weights=weights, valid_mask=valid_mask)
    bins = chamfer_bin_loss(centers, gt, valid_mask=valid_mask)
    minmax = minmax_loss(centers, gt, valid_mask=valid_mask)
    total = stage.alpha * pixel + stage.beta * bins + stage.gamma * minmax
    return LossBreakdown(total=total, pixel=pixel, bins=bins, minmax=minmax)
