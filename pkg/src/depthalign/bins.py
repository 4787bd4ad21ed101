"""Depth-bin arithmetic and the shared domain containers.

Depth is predicted per image as a probability mixture over an adaptive
partition of the depth range: a head emits raw bin widths, the widths are
rectified and normalized to sum to one, each bin gets a representative
center depth, and the final per-pixel depth is the probability-weighted
sum of those centers.

The tensor operations in this module accept torch tensors (with autograd
intact) or anything `numpy.asarray` understands, and work on the last
axis so batched `(B, N)` width vectors pass straight through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import ValidationError

# Tolerance for "widths sum to one" checks, both at runtime and in the
# domain-type invariants.
WIDTH_SUM_TOL = 1e-6

# Default shift added to rectified raw widths so every bin keeps a
# strictly positive width even when the head emits all zeros.
DEFAULT_TAU = 1e-3


def _as_float_tensor(value, name: str) -> Tensor:
    if isinstance(value, Tensor):
        if not value.is_floating_point():
            return value.to(torch.float64)
        return value
    arr = np.asarray(value)
    if arr.dtype.kind == "f":
        return torch.as_tensor(arr)
    if arr.dtype.kind in "iu":
        return torch.as_tensor(arr, dtype=torch.float64)
    raise ValidationError(f"{name} must be numeric, got dtype {arr.dtype}")


@dataclass(frozen=True)
class DepthRange:
    """Scene depth interval [d_min, d_max] in meters."""

    d_min: float
    d_max: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.d_min) and np.isfinite(self.d_max)):
            raise ValidationError("depth range bounds must be finite")
        if not 0.0 <= self.d_min < self.d_max:
            raise ValidationError(
                f"depth range requires 0 <= d_min < d_max, got [{self.d_min}, {self.d_max}]"
            )

    @property
    def span(self) -> float:
        return self.d_max - self.d_min


@dataclass
class DepthMap:
    """H x W grid of metric depths with a per-pixel validity mask.

    Every value flagged valid must be finite and strictly positive;
    values under invalid pixels are unconstrained and ignored everywhere.
    """

    values: np.ndarray
    valid_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValidationError("depth map must be a 2-D H x W grid with H, W >= 1")
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.values.shape, dtype=bool)
        else:
            self.valid_mask = np.asarray(self.valid_mask).astype(bool)
        if self.valid_mask.shape != self.values.shape:
            raise ValidationError("valid mask must have the same shape as the values")
        valid = self.values[self.valid_mask]
        if valid.size and not (np.all(np.isfinite(valid)) and np.all(valid > 0)):
            raise ValidationError("valid depth values must be finite and > 0")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def valid_values(self) -> np.ndarray:
        return self.values[self.valid_mask]

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> Tensor:
        return torch.as_tensor(np.ascontiguousarray(self.values), dtype=dtype)

    def mask_tensor(self) -> Tensor:
        return torch.as_tensor(np.ascontiguousarray(self.valid_mask))

    @classmethod
    def from_tensor(cls, values: Tensor, valid_mask: Tensor | None = None) -> "DepthMap":
        mask = None if valid_mask is None else valid_mask.detach().cpu().numpy()
        return cls(values.detach().cpu().numpy(), mask)


@dataclass(frozen=True)
class BinPartition:
    """Per-image normalized bin widths and ascending bin centers over a depth range."""

    widths: np.ndarray
    centers: np.ndarray
    depth_range: DepthRange

    def __post_init__(self) -> None:
        object.__setattr__(self, "widths", np.asarray(self.widths, dtype=np.float64))
        object.__setattr__(self, "centers", np.asarray(self.centers, dtype=np.float64))
        if self.widths.ndim != 1 or self.widths.size < 1:
            raise ValidationError("bin widths must be a 1-D vector with at least one bin")
        if self.centers.shape != self.widths.shape:
            raise ValidationError("bin centers must match the widths in length")
        if not np.all(self.widths > 0):
            raise ValidationError("bin widths must be strictly positive")
        if abs(float(self.widths.sum()) - 1.0) > WIDTH_SUM_TOL:
            raise ValidationError("bin widths must sum to 1")
        if not np.all(np.diff(self.centers) > 0):
            raise ValidationError("bin centers must be strictly increasing")
        if not (self.depth_range.d_min < self.centers[0] and self.centers[-1] < self.depth_range.d_max):
            raise ValidationError("bin centers must lie strictly inside the depth range")

    @property
    def num_bins(self) -> int:
        return int(self.widths.size)

    @classmethod
    def from_widths(cls, widths, depth_range: DepthRange) -> "BinPartition":
        widths64 = torch.as_tensor(np.asarray(widths, dtype=np.float64))
        centers = bin_centers(widths64, depth_range)
        return cls(widths64.numpy(), centers.numpy(), depth_range)

    @classmethod
    def uniform(cls, num_bins: int, depth_range: DepthRange) -> "BinPartition":
        if num_bins < 1:
            raise ValidationError("num_bins must be >= 1")
        return cls.from_widths(np.full(num_bins, 1.0 / num_bins), depth_range)


@dataclass(frozen=True)
class BinProbabilityMap:
    """H x W x N grid of per-pixel probabilities over depth bins."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        if self.probs.ndim != 3 or self.probs.shape[-1] < 1:
            raise ValidationError("probability map must have shape H x W x N")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ValidationError("probabilities must lie in [0, 1]")
        sums = self.probs.sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > WIDTH_SUM_TOL:
            raise ValidationError("per-pixel probabilities must sum to 1")

    @property
    def num_bins(self) -> int:
        return int(self.probs.shape[-1])

    @classmethod
    def from_tensor(cls, probs_nhw: Tensor) -> "BinProbabilityMap":
        """Build from an (N, H, W) tensor, absorbing float32 rounding in the sums."""
        arr = probs_nhw.detach().cpu().numpy().astype(np.float64).transpose(1, 2, 0)
        sums = arr.sum(axis=-1, keepdims=True)
        if np.max(np.abs(sums - 1.0)) > 1e-4:
            raise ValidationError("tensor is not a per-pixel probability map")
        return cls(arr / sums)


def normalize_bin_widths(raw, tau: float = DEFAULT_TAU) -> Tensor:
    """Turn raw head outputs into strictly positive widths that sum to one.

    Negative raw entries are rectified to zero first (the head may emit
    them), then each entry is shifted by tau and divided by the shifted
    total: w_i = (max(raw_i, 0) + tau) / sum_j (max(raw_j, 0) + tau).
    Operates on the last axis.
    """
    raw_t = _as_float_tensor(raw, "raw widths")
    if raw_t.ndim < 1 or raw_t.shape[-1] < 1:
        raise ValidationError("raw widths must have at least one entry")
    if not torch.isfinite(raw_t).all():
        raise ValidationError("raw widths must be finite")
    if not (np.isfinite(tau) and tau > 0):
        raise ValidationError("tau must be a finite positive number")
    shifted = raw_t.clamp(min=0) + tau
    return shifted / shifted.sum(dim=-1, keepdim=True)


def bin_centers(widths, depth_range: DepthRange) -> Tensor:
    """Map normalized widths to ascending center depths inside the range.

    Each center sits half a width past the cumulative left edge:
    c_i = d_min + span * (w_i / 2 + sum_{j<i} w_j).
    Operates on the last axis.
    """
    widths_t = _as_float_tensor(widths, "widths")
    if widths_t.ndim < 1 or widths_t.shape[-1] < 1:
        raise ValidationError("widths must have at least one entry")
    with torch.no_grad():
        if not torch.isfinite(widths_t).all() or not bool((widths_t > 0).all()):
            raise ValidationError("widths must be finite and strictly positive")
        if float((widths_t.sum(dim=-1) - 1.0).abs().max()) > WIDTH_SUM_TOL:
            raise ValidationError("widths must sum to 1 before computing centers")
    cumulative = torch.cumsum(widths_t, dim=-1)
    return depth_range.d_min + depth_range.span * (cumulative - 0.5 * widths_t)


def combine(probs, centers) -> Tensor:
    """Per-pixel expected depth under bin probabilities.

    probs has shape (..., N, H, W) and centers (N,) or (..., N); the
    result is the (..., H, W) convex combination of centers, so every
    output lies in [min(centers), max(centers)] up to rounding.
    """
    probs_t = _as_float_tensor(probs, "probabilities")
    centers_t = _as_float_tensor(centers, "centers")
    if probs_t.ndim < 3:
        raise ValidationError("probabilities must have shape (..., N, H, W)")
    if centers_t.ndim < 1 or centers_t.shape[-1] != probs_t.shape[-3]:
        raise ValidationError(
            f"centers length {tuple(centers_t.shape)} does not match "
            f"probability channels {probs_t.shape[-3]}"
        )
    return (probs_t * centers_t[..., :, None, None]).sum(dim=-3)
