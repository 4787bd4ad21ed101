"""Synthetic RGB-D scenes and on-disk dataset plumbing.

Scenes are procedurally generated at desk scale: a background plane with
a depth gradient (a floor/wall look) plus a handful of axis-aligned
rectangles at distinct depths, painted far-to-near so nearer objects
occlude farther ones. The pseudo-RGB image shades each surface by its
depth (closer is brighter) under a per-surface albedo, with light noise
on top, so image content genuinely predicts depth. Everything is
deterministic per seed.

On disk, a dataset is a small text manifest plus 8-bit RGB and 16-bit
grayscale depth PNGs; stored depth units convert to meters through the
manifest's scale factor, and the value 0 marks invalid pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .bins import DepthMap, DepthRange
from .errors import (
    CorruptImageError,
    DepthOutOfRangeError,
    ManifestError,
    MissingFileError,
    ShapeMismatchError,
    ValidationError,
)

# Meters per stored depth unit: 16-bit range then covers 0-13.1 m.
DEFAULT_DEPTH_SCALE = 1.0 / 5000.0

MANIFEST_NAME = "manifest.txt"

# Margins (as fractions of the range span) keeping generated depths
# strictly inside the configured range.
_NEAR_MARGIN = 0.02
_FAR_MARGIN = 0.98


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of the procedural scene generator."""

    height: int = 64
    width: int = 64
    depth_range: DepthRange = field(default_factory=lambda: DepthRange(0.0, 10.0))
    min_objects: int = 2
    max_objects: int = 8

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValidationError("scene dims must be >= 1")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValidationError("need 0 <= min_objects <= max_objects")


@dataclass
class SceneSample:
    """One RGB-D pair: image in [0,1], depth map, and generator metadata."""

    image: np.ndarray
    depth: DepthMap
    meta: dict

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[-1] != 3:
            raise ValidationError("image must be H x W x 3")
        if self.image.shape[:2] != self.depth.values.shape:
            raise ValidationError("image and depth dims must match")
        if np.any(self.image < 0) or np.any(self.image > 1) or not np.all(np.isfinite(self.image)):
            raise ValidationError("image values must lie in [0, 1]")
        bounds = self.meta.get("depth_range")
        if bounds is not None:
            lo, hi = bounds
            vals = self.depth.valid_values()
            if vals.size and (vals.min() < lo or vals.max() > hi):
                raise ValidationError("depth values fall outside the configured range")

    @property
    def hw(self) -> tuple[int, int]:
        return self.depth.values.shape


def generate_scene(seed: int, config: SceneConfig) -> SceneSample:
    """Render one deterministic synthetic scene for the given seed."""
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    lo, span = config.depth_range.d_min, config.depth_range.span
    floor = lo + _NEAR_MARGIN * span
    ceil = lo + _FAR_MARGIN * span

    # background plane: vertical gradient, far at the top
    near = float(rng.uniform(floor, lo + 0.3 * span))
    far = float(rng.uniform(lo + 0.6 * span, ceil))
    rows = np.linspace(far, near, h)[:, None]
    depth = np.broadcast_to(rows, (h, w)).copy()

    shade_span = max(far - floor, 1e-9)

    def shading(d):
        return 1.0 - 0.75 * np.clip((d - floor) / shade_span, 0.0, 1.0)

    background_color = rng.uniform(0.3, 1.0, size=3)
    image = background_color[None, None, :] * shading(depth)[:, :, None]

    num_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    boxes = []
    for _ in range(num_objects):
        bh = int(rng.integers(max(1, h // 10), max(2, h // 2)))
        bw = int(rng.integers(max(1, w // 10), max(2, w // 2)))
        y0 = int(rng.integers(0, max(1, h - bh + 1)))
        x0 = int(rng.integers(0, max(1, w - bw + 1)))
        d = float(rng.uniform(floor, ceil))
        color = rng.uniform(0.2, 1.0, size=3)
        boxes.append((d, y0, x0, bh, bw, color))
    # paint far to near so closer rectangles occlude farther ones
    for d, y0, x0, bh, bw, color in sorted(boxes, key=lambda b: -b[0]):
        depth[y0 : y0 + bh, x0 : x0 + bw] = d
        image[y0 : y0 + bh, x0 : x0 + bw] = color * shading(d)

    noise = rng.uniform(-0.02, 0.02, size=(h, w, 3))
    image = np.clip(image + noise, 0.0, 1.0)

    meta = {
        "seed": int(seed),
        "num_objects": num_objects,
        "plane": [near, far],
        "depth_range": [config.depth_range.d_min, config.depth_range.d_max],
    }
    return SceneSample(image, DepthMap(depth), meta)


def generate_dataset(config: SceneConfig, count: int, base_seed: int = 0) -> list[SceneSample]:
    """Generate `count` scenes seeded base_seed, base_seed+1, ..."""
    if count < 1:
        raise ValidationError("count must be >= 1")
    return [generate_scene(base_seed + i, config) for i in range(count)]


def hflip(sample: SceneSample) -> SceneSample:
    """Mirror image and depth left-right (an involution)."""
    meta = {**sample.meta, "flipped": not sample.meta.get("flipped", False)}
    depth = DepthMap(sample.depth.values[:, ::-1].copy(), sample.depth.valid_mask[:, ::-1].copy())
    return SceneSample(sample.image[:, ::-1].copy(), depth, meta)


def apply_augmentation(sample: SceneSample, flip: bool, scales) -> SceneSample:
    """Deterministic augmentation core: optional mirror + color scaling.

    Only the image is color-scaled (clipped back to [0, 1]); depth is
    touched by the flip alone, so its value multiset never changes.
    """
    scales = np.asarray(scales, dtype=np.float64)
    if scales.shape != (3,) or np.any(scales <= 0):
        raise ValidationError("need three positive per-channel scales")
    out = hflip(sample) if flip else sample
    image = np.clip(out.image * scales[None, None, :], 0.0, 1.0)
    return SceneSample(image, out.depth, dict(out.meta))


def augment(sample: SceneSample, seed: int) -> SceneSample:
    """Random flip (p=0.5) plus per-channel color scale in [0.8, 1.2]."""
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < 0.5)
    scales = rng.uniform(0.8, 1.2, size=3)
    return apply_augmentation(sample, flip, scales)


@dataclass(frozen=True)
class DatasetManifest:
    """Indexed view of an on-disk dataset: sample paths plus decode keys."""

    pairs: tuple[tuple[Path, Path], ...]
    depth_scale: float
    depth_range: DepthRange

    def __post_init__(self) -> None:
        if self.depth_scale <= 0 or not np.isfinite(self.depth_scale):
            raise ManifestError("depth scale must be a positive number")
        if len(self.pairs) < 1:
            raise ManifestError("manifest lists no samples")

    def __len__(self) -> int:
        return len(self.pairs)


def _encode_depth(depth: DepthMap, scale: float) -> np.ndarray:
    units = np.round(depth.values / scale)
    units = np.where(depth.valid_mask, np.clip(units, 1, 65535), 0)
    return units.astype(np.uint16)


def write_dataset(
    samples: list[SceneSample],
    out_dir,
    depth_range: DepthRange,
    depth_scale: float = DEFAULT_DEPTH_SCALE,
) -> Path:
    """Write PNG pairs and a manifest; returns the manifest path."""
    if not samples:
        raise ValidationError("need at least one sample")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)
    lines = [
        f"# depth_scale {depth_scale!r}",
        f"# depth_min {depth_range.d_min!r}",
        f"# depth_max {depth_range.d_max!r}",
    ]
    for i, sample in enumerate(samples):
        image_rel = f"images/{i:05d}.png"
        depth_rel = f"depth/{i:05d}.png"
        rgb = np.round(sample.image * 255.0).astype(np.uint8)
        Image.fromarray(rgb).save(out_dir / image_rel)
        Image.fromarray(_encode_depth(sample.depth, depth_scale)).save(out_dir / depth_rel)
        lines.append(f"{image_rel}\t{depth_rel}")
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest file and verify every listed file exists."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    header: dict[str, float] = {}
    pairs: list[tuple[Path, Path]] = []
    root = path.parent
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) != 2:
                raise ManifestError(f"{path}:{lineno}: bad header line {raw!r}")
            try:
                header[parts[0]] = float(parts[1])
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise ManifestError(f"{path}:{lineno}: expected two tab-separated paths")
        pairs.append((root / fields[0], root / fields[1]))
    missing = [k for k in ("depth_scale", "depth_min", "depth_max") if k not in header]
    if missing:
        raise ManifestError(f"{path}: header missing {missing}")
    for image_path, depth_path in pairs:
        if not image_path.is_file():
            raise MissingFileError(f"missing image file: {image_path}")
        if not depth_path.is_file():
            raise MissingFileError(f"missing depth file: {depth_path}")
    try:
        depth_range = DepthRange(header["depth_min"], header["depth_max"])
    except ValidationError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    return DatasetManifest(tuple(pairs), header["depth_scale"], depth_range)


def _open_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img)
    except FileNotFoundError as exc:
        raise MissingFileError(str(exc)) from exc
    except Exception as exc:  # Pillow raises various types on bad bytes
        raise CorruptImageError(f"cannot decode {path}: {exc}") from exc


def read_sample(manifest: DatasetManifest, index: int) -> SceneSample:
    """Decode one manifest entry into a SceneSample (zero depth = invalid)."""
    if not 0 <= index < len(manifest):
        raise ValidationError(f"index {index} out of range for {len(manifest)} samples")
    image_path, depth_path = manifest.pairs[index]
    rgb = _open_image(image_path)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise CorruptImageError(f"{image_path} is not an RGB image")
    units = _open_image(depth_path)
    if units.ndim != 2:
        raise CorruptImageError(f"{depth_path} is not a grayscale depth image")
    if units.shape != rgb.shape[:2]:
        raise ShapeMismatchError(
            f"depth {units.shape} does not match image {rgb.shape[:2]} for index {index}"
        )
    mask = units > 0
    depth_m = units.astype(np.float64) * manifest.depth_scale
    tol = manifest.depth_scale / 2
    valid = depth_m[mask]
    if valid.size and (
        valid.min() < manifest.depth_range.d_min - tol
        or valid.max() > manifest.depth_range.d_max + tol
    ):
        raise DepthOutOfRangeError(
            f"depth in {depth_path} exceeds [{manifest.depth_range.d_min}, "
            f"{manifest.depth_range.d_max}] by more than the quantization step"
        )
    # smooth the tolerated quantization overhang back into the range
    lower = max(manifest.depth_range.d_min, manifest.depth_scale)
    depth_m = np.clip(depth_m, lower, manifest.depth_range.d_max)
    meta = {
        "index": index,
        "image_path": str(image_path),
        "depth_path": str(depth_path),
        "depth_range": [manifest.depth_range.d_min, manifest.depth_range.d_max],
    }
    image = rgb.astype(np.float64) / 255.0
    dm = DepthMap(np.where(mask, depth_m, 1.0), mask)
    return SceneSample(image, dm, meta)
