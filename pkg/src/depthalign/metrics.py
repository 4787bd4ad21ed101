"""Evaluation metrics and depth-distribution drift diagnostics.

Besides the six standard depth scores (REL, RMS, log10, and the three
threshold accuracies), this module quantifies how far a prediction's
depth *distribution* has drifted from the ground truth: histograms over
the scene depth range compared by total-variation distance, plus the gap
between the predicted and true depth extremes. A signed per-pixel error
map supports visual inspection of where a model over- or undershoots.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .bins import DepthMap, DepthRange
from .errors import ValidationError

# Histogram resolution used by the drift diagnostics.
DEFAULT_HISTOGRAM_BINS = 100

METRIC_NAMES = ("rel", "rms", "log10", "delta1", "delta2", "delta3")


@dataclass(frozen=True)
class ErrorMetrics:
    """The six standard depth-accuracy scores."""

    rel: float
    rms: float
    log10: float
    delta1: float
    delta2: float
    delta3: float

    def __post_init__(self) -> None:
        for name in METRIC_NAMES:
            val = getattr(self, name)
            if not np.isfinite(val):
                raise ValidationError(f"metric {name} must be finite, got {val}")
        for name in ("delta1", "delta2", "delta3"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {val}")

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class DepthHistogram:
    """Normalized depth histogram on uniform bins over a depth range."""

    edges: np.ndarray
    mass: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=np.float64))
        object.__setattr__(self, "mass", np.asarray(self.mass, dtype=np.float64))
        if self.edges.ndim != 1 or self.edges.size < 2:
            raise ValidationError("histogram needs at least two edges")
        if not np.all(np.diff(self.edges) > 0):
            raise ValidationError("histogram edges must be strictly ascending")
        if self.mass.shape != (self.edges.size - 1,):
            raise ValidationError("mass length must be number of edges minus one")
        if np.any(self.mass < 0) or abs(float(self.mass.sum()) - 1.0) > 1e-9:
            raise ValidationError("mass entries must be >= 0 and sum to 1")

    @property
    def num_bins(self) -> int:
        return int(self.mass.size)


@dataclass(frozen=True)
class DriftReport:
    """Distribution-drift scalars bundled with the standard metrics."""

    histogram_distance: float
    range_deviation: float
    metrics: ErrorMetrics

    def __post_init__(self) -> None:
        if not (np.isfinite(self.histogram_distance) and 0.0 <= self.histogram_distance <= 1.0 + 1e-12):
            raise ValidationError("histogram distance must lie in [0, 1]")
        if not (np.isfinite(self.range_deviation) and self.range_deviation >= 0.0):
            raise ValidationError("range deviation must be finite and >= 0")

    def as_dict(self) -> dict[str, float]:
        out = {"histogram_distance": self.histogram_distance, "range_deviation": self.range_deviation}
        out.update(self.metrics.as_dict())
        return out

    def to_text(self) -> str:
        return "\n".join(f"{k} = {v:.6f}" for k, v in self.as_dict().items())

    def write_csv(self, path) -> None:
        record = self.as_dict()
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(record.keys())
            writer.writerow(f"{v:.10g}" for v in record.values())


def _paired_values(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred_dm = pred if isinstance(pred, DepthMap) else DepthMap(np.asarray(pred, dtype=np.float64))
    gt_dm = gt if isinstance(gt, DepthMap) else DepthMap(np.asarray(gt, dtype=np.float64))
    if pred_dm.values.shape != gt_dm.values.shape:
        raise ValidationError("pred and gt must share a shape")
    mask = pred_dm.valid_mask & gt_dm.valid_mask
    if not mask.any():
        raise ValidationError("no pixels are valid in both maps")
    y = pred_dm.values[mask].astype(np.float64)
    g = gt_dm.values[mask].astype(np.float64)
    if not (np.all(np.isfinite(y)) and np.all(y > 0) and np.all(np.isfinite(g)) and np.all(g > 0)):
        raise ValidationError("depths must be finite and > 0 at every valid pixel")
    return y, g


def standard_metrics(pred, gt) -> ErrorMetrics:
    """REL, RMS, log10 errors and threshold accuracies over shared valid pixels.

    delta_k is the fraction of pixels whose ratio max(y/g, g/y) is
    strictly below 1.25**k.
    """
    y, g = _paired_values(pred, gt)
    ratio = np.maximum(y / g, g / y)
    return ErrorMetrics(
        rel=float(np.mean(np.abs(y - g) / g)),
        rms=float(np.sqrt(np.mean((y - g) ** 2))),
        log10=float(np.mean(np.abs(np.log10(y) - np.log10(g)))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


def depth_histogram(
    depth, depth_range: DepthRange, num_bins: int = DEFAULT_HISTOGRAM_BINS
) -> DepthHistogram:
    """Normalized histogram of valid depths on uniform bins over the range.

    Bins are [e_k, e_{k+1}) with the last bin right-inclusive; values
    outside the range are clamped into the end bins so mass is conserved.
    """
    if num_bins < 1:
        raise ValidationError("num_bins must be >= 1")
    dm = depth if isinstance(depth, DepthMap) else DepthMap(np.asarray(depth, dtype=np.float64))
    vals = dm.valid_values().astype(np.float64)
    if vals.size == 0:
        raise ValidationError("depth map has no valid pixels")
    edges = np.linspace(depth_range.d_min, depth_range.d_max, num_bins + 1)
    width = depth_range.span / num_bins
    idx = np.floor((vals - depth_range.d_min) / width).astype(np.int64)
    idx = np.clip(idx, 0, num_bins - 1)
    counts = np.bincount(idx, minlength=num_bins).astype(np.float64)
    return DepthHistogram(edges, counts / counts.sum())


def total_variation_distance(a: DepthHistogram, b: DepthHistogram) -> float:
    """Half the L1 distance between two histograms on identical edges."""
    if a.edges.shape != b.edges.shape or not np.allclose(a.edges, b.edges):
        raise ValidationError("histograms must share bin edges")
    return float(0.5 * np.abs(a.mass - b.mass).sum())


def range_deviation(pred, gt) -> float:
    """|min(pred) - min(gt)| + |max(pred) - max(gt)| over valid pixels."""
    pred_dm = pred if isinstance(pred, DepthMap) else DepthMap(np.asarray(pred, dtype=np.float64))
    gt_dm = gt if isinstance(gt, DepthMap) else DepthMap(np.asarray(gt, dtype=np.float64))
    y, g = pred_dm.valid_values(), gt_dm.valid_values()
    if y.size == 0 or g.size == 0:
        raise ValidationError("both maps need at least one valid pixel")
    return float(abs(y.min() - g.min()) + abs(y.max() - g.max()))


def drift_report(
    pred, gt, depth_range: DepthRange, num_bins: int = DEFAULT_HISTOGRAM_BINS
) -> DriftReport:
    """Bundle histogram distance, range deviation, and the standard metrics."""
    hist_pred = depth_histogram(pred, depth_range, num_bins)
    hist_gt = depth_histogram(gt, depth_range, num_bins)
    return DriftReport(
        histogram_distance=total_variation_distance(hist_pred, hist_gt),
        range_deviation=range_deviation(pred, gt),
        metrics=standard_metrics(pred, gt),
    )


def error_map(pred, gt) -> np.ndarray:
    """Signed per-pixel error (pred - gt); positive means predicted too far."""
    pred_dm = pred if isinstance(pred, DepthMap) else DepthMap(np.asarray(pred, dtype=np.float64))
    gt_dm = gt if isinstance(gt, DepthMap) else DepthMap(np.asarray(gt, dtype=np.float64))
    if pred_dm.values.shape != gt_dm.values.shape:
        raise ValidationError("pred and gt must share a shape")
    return pred_dm.values.astype(np.float64) - gt_dm.values.astype(np.float64)
