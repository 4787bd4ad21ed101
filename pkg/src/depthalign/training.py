"""Two-stage training loop, checkpointing, evaluation, and diagnostics.

Training runs the published recipe: a local stage (pixel + bin-center
losses) followed by a global stage that adds the min-max range loss and
depth-related pixel weights, under an adaptive-moment optimizer with
moment coefficients (0.9, 0.999), weight decay 1e-4, and a learning rate
that starts at 2e-4 and shrinks by 10% every 5 epochs. The epoch counter
— and with it the learning-rate schedule — runs continuously across
stages, and the stage transition keeps model weights and, by default,
optimizer state untouched.

Checkpoints are plain pickles of numpy-converted state with a version
header; saving, loading, and saving again is byte-identical. Every step
logs each loss term, so two seeded runs can be compared record by
record.
"""

from __future__ import annotations

import json
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bins import DepthMap, DepthRange
from .data import (
    DatasetManifest,
    SceneConfig,
    SceneSample,
    augment,
    generate_dataset,
    load_manifest,
    read_sample,
)
from .errors import CheckpointError, ConfigError, DivergenceError
from .losses import GLOBAL_STAGE, LOCAL_STAGE, StageConfig, total_loss
from .metrics import (
    DEFAULT_HISTOGRAM_BINS,
    DriftReport,
    depth_histogram,
    drift_report,
    error_map,
)
from .network import DepthEstimator, NetworkConfig, count_parameters, predict_sample

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class OptimizerConfig:
    """Adaptive-moment optimizer settings and the stepped lr decay."""

    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    lr_decay: float = 0.9
    decay_every: int = 5

    def __post_init__(self) -> None:
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ConfigError("learning rate must be > 0")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError("moment coefficients must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "betas": list(self.betas),
            "weight_decay": self.weight_decay,
            "lr_decay": self.lr_decay,
            "decay_every": self.decay_every,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerConfig":
        try:
            return cls(
                lr=float(data.get("lr", 2e-4)),
                betas=tuple(data.get("betas", (0.9, 0.999))),
                weight_decay=float(data.get("weight_decay", 1e-4)),
                lr_decay=float(data.get("lr_decay", 0.9)),
                decay_every=int(data.get("decay_every", 5)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad optimizer record: {exc}") from exc


def lr_for_epoch(optimizer: OptimizerConfig, epoch: int) -> float:
    """Stepped decay: lr0 * decay^(epoch // decay_every), epoch counted globally."""
    return optimizer.lr * optimizer.lr_decay ** (epoch // optimizer.decay_every)


@dataclass(frozen=True)
class StageSchedule:
    """One training stage: its loss configuration and duration.

    Duration is `epochs`, unless `max_steps` is set, in which case the
    stage runs exactly that many optimizer steps (cycling through the
    dataset as often as needed).
    """

    epochs: int
    stage: StageConfig
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "max_steps": self.max_steps,
            "alpha": self.stage.alpha,
            "beta": self.stage.beta,
            "gamma": self.stage.gamma,
            "u": self.stage.u,
            "v": self.stage.v,
            "weight_mode": self.stage.weight_mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StageSchedule":
        try:
            stage = StageConfig(
                alpha=float(data["alpha"]),
                beta=float(data["beta"]),
                gamma=float(data["gamma"]),
                u=float(data["u"]),
                v=float(data.get("v", 0.0)),
                weight_mode=str(data.get("weight_mode", "zero")),
            )
            max_steps = data.get("max_steps")
            return cls(
                epochs=int(data["epochs"]),
                stage=stage,
                max_steps=None if max_steps is None else int(max_steps),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad stage record: {exc}") from exc


def default_stages(local_epochs: int = 10, global_epochs: int = 10) -> tuple[StageSchedule, ...]:
    """The published 10+10 epoch local-then-global schedule."""
    return (
        StageSchedule(local_epochs, LOCAL_STAGE),
        StageSchedule(global_epochs, GLOBAL_STAGE),
    )


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs, serializable to a flat JSON record."""

    network: NetworkConfig = field(default_factory=NetworkConfig)
    stages: tuple[StageSchedule, ...] = field(default_factory=default_stages)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 24
    seed: int = 0
    dataset_size: int = 200
    scene: SceneConfig | None = None
    manifest_path: str | None = None
    augment: bool = False
    reset_optimizer_between_stages: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.manifest_path is None:
            scene = self.scene or SceneConfig(
                height=self.network.input_hw[0],
                width=self.network.input_hw[1],
                depth_range=self.network.depth_range,
            )
            object.__setattr__(self, "scene", scene)
            if self.dataset_size < 1:
                raise ConfigError("dataset size must be >= 1")
            if (scene.height, scene.width) != self.network.input_hw:
                raise ConfigError("scene dims must match the network input size")
            if scene.depth_range != self.network.depth_range:
                raise ConfigError("scene depth range must match the network's")

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "stages": [s.to_dict() for s in self.stages],
            "optimizer": self.optimizer.to_dict(),
            "batch_size": self.batch_size,
            "seed": self.seed,
            "dataset_size": self.dataset_size,
            "scene": None
            if self.scene is None
            else {
                "height": self.scene.height,
                "width": self.scene.width,
                "depth_range": [self.scene.depth_range.d_min, self.scene.depth_range.d_max],
                "min_objects": self.scene.min_objects,
                "max_objects": self.scene.max_objects,
            },
            "manifest_path": self.manifest_path,
            "augment": self.augment,
            "reset_optimizer_between_stages": self.reset_optimizer_between_stages,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        try:
            network = NetworkConfig.from_dict(data["network"]) if "network" in data else NetworkConfig()
            stages = tuple(StageSchedule.from_dict(s) for s in data.get("stages", []))
            scene = None
            if data.get("scene") is not None:
                s = data["scene"]
                lo, hi = s["depth_range"]
                scene = SceneConfig(
                    height=int(s["height"]),
                    width=int(s["width"]),
                    depth_range=DepthRange(float(lo), float(hi)),
                    min_objects=int(s.get("min_objects", 2)),
                    max_objects=int(s.get("max_objects", 8)),
                )
            return cls(
                network=network,
                stages=stages or default_stages(),
                optimizer=OptimizerConfig.from_dict(data.get("optimizer", {})),
                batch_size=int(data.get("batch_size", 24)),
                seed=int(data.get("seed", 0)),
                dataset_size=int(data.get("dataset_size", 200)),
                scene=scene,
                manifest_path=data.get("manifest_path"),
                augment=bool(data.get("augment", False)),
                reset_optimizer_between_stages=bool(data.get("reset_optimizer_between_stages", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad training config record: {exc}") from exc


def describe_config(config: TrainConfig) -> str:
    """Human-readable run header echoing the schedule constants."""
    opt = config.optimizer
    lines = [
        f"network: input {config.network.input_hw}, bins {config.network.num_bins}, "
        f"embed {config.network.embed_dim}, pst {config.network.use_pst}",
        f"optimizer: lr {opt.lr:g}, moments {opt.betas}, weight decay {opt.weight_decay:g}, "
        f"lr x{opt.lr_decay:g} every {opt.decay_every} epochs",
        f"batch size: {config.batch_size}, seed: {config.seed}",
    ]
    for i, sched in enumerate(config.stages, start=1):
        s = sched.stage
        duration = f"{sched.max_steps} steps" if sched.max_steps is not None else f"{sched.epochs} epochs"
        lines.append(
            f"stage {i}: {duration}, alpha={s.alpha:g} beta={s.beta:g} gamma={s.gamma:g} "
            f"u={s.u:g} v={s.v:g} weights={s.weight_mode}"
        )
    return "\n".join(lines)


def build_dataset(config: TrainConfig) -> list[SceneSample]:
    """Materialize the configured data source as an in-memory sample list."""
    if config.manifest_path is not None:
        manifest = load_manifest(config.manifest_path)
        if manifest.depth_range != config.network.depth_range:
            raise ConfigError(
                "manifest depth range does not match the network configuration"
            )
        return [read_sample(manifest, i) for i in range(len(manifest))]
    return generate_dataset(config.scene, config.dataset_size, base_seed=config.seed)


def _batch_tensors(samples: list[SceneSample]):
    images = torch.from_numpy(
        np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    )
    depths = torch.from_numpy(np.stack([s.depth.values for s in samples]).astype(np.float32))
    masks = torch.from_numpy(np.stack([s.depth.valid_mask for s in samples]))
    return images, depths, masks


def _state_to_numpy(obj):
    if isinstance(obj, torch.Tensor):
        return obj.detach().cpu().numpy().copy(order="C")
    if isinstance(obj, dict):
        return {k: _state_to_numpy(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_state_to_numpy(v) for v in obj]
    return obj


def _state_to_torch(obj):
    if isinstance(obj, np.ndarray):
        return torch.as_tensor(obj.copy())
    if isinstance(obj, dict):
        return {k: _state_to_torch(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_state_to_torch(v) for v in obj]
    return obj


def build_checkpoint(
    model: DepthEstimator,
    optimizer: torch.optim.Optimizer | None,
    config: TrainConfig,
    stage_index: int,
    epoch: int,
    global_step: int,
) -> dict:
    """Snapshot everything needed to resume or evaluate a run."""
    return {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "model": {k: _state_to_numpy(v) for k, v in model.state_dict().items()},
        "optimizer": None if optimizer is None else _state_to_numpy(optimizer.state_dict()),
        "cursor": {"stage_index": stage_index, "epoch": epoch, "global_step": global_step},
    }


def save_checkpoint(checkpoint: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        payload = pickle.dumps(checkpoint, protocol=4)
    except Exception as exc:
        raise CheckpointError(f"cannot serialize checkpoint: {exc}") from exc
    path.write_bytes(payload)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        checkpoint = pickle.loads(path.read_bytes())
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(checkpoint, dict) or "version" not in checkpoint:
        raise CheckpointError(f"{path} is not a recognized checkpoint")
    if checkpoint["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {checkpoint['version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    for key in ("config", "model", "cursor"):
        if key not in checkpoint:
            raise CheckpointError(f"checkpoint missing field {key!r}")
    return checkpoint


def restore_model(checkpoint: dict) -> tuple[DepthEstimator, TrainConfig]:
    """Rebuild the network from a loaded checkpoint."""
    config = TrainConfig.from_dict(checkpoint["config"])
    model = DepthEstimator(config.network)
    state = {k: _state_to_torch(v) for k, v in checkpoint["model"].items()}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not fit the configured network: {exc}") from exc
    return model, config


def _make_optimizer(model: DepthEstimator, opt: OptimizerConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=opt.lr, betas=opt.betas, weight_decay=opt.weight_decay
    )


@dataclass
class TrainResult:
    """Trained model plus the full per-step log and final checkpoint."""

    model: DepthEstimator
    config: TrainConfig
    logs: list[dict]
    checkpoint: dict
    checkpoint_path: Path | None


def train(config: TrainConfig, out_dir=None, log_fn=None) -> TrainResult:
    """Run the staged schedule on the configured dataset.

    Emits one log record per optimizer step with every loss term, the
    learning rate, and the stage/epoch cursor. A non-finite total loss
    aborts with a diagnostic dump. When `out_dir` is given, the final
    checkpoint and the step log are written there.
    """
    say = log_fn or (lambda _msg: None)
    say(describe_config(config))

    torch.manual_seed(config.seed)
    model = DepthEstimator(config.network)
    optimizer = _make_optimizer(model, config.optimizer)
    samples = build_dataset(config)
    order_rng = np.random.default_rng(config.seed)

    logs: list[dict] = []
    global_epoch = 0
    global_step = 0
    for stage_index, sched in enumerate(config.stages):
        if config.reset_optimizer_between_stages and stage_index > 0:
            optimizer = _make_optimizer(model, config.optimizer)
        steps_left = sched.max_steps
        epochs = sched.epochs if steps_left is None else 10**9
        for _ in range(epochs):
            if steps_left is not None and steps_left <= 0:
                break
            lr = lr_for_epoch(config.optimizer, global_epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = order_rng.permutation(len(samples))
            for start in range(0, len(order), config.batch_size):
                if steps_left is not None and steps_left <= 0:
                    break
                chosen = [samples[i] for i in order[start : start + config.batch_size]]
                if config.augment:
                    chosen = [
                        augment(s, seed=[config.seed, global_epoch, int(order[start + k])])
                        for k, s in enumerate(chosen)
                    ]
                images, depths, masks = _batch_tensors(chosen)
                out = model(images)
                breakdown = total_loss(
                    out.depth, depths, out.centers, sched.stage, valid_mask=masks
                )
                if not torch.isfinite(breakdown.total):
                    record = {
                        "stage": stage_index,
                        "epoch": global_epoch,
                        "step": global_step,
                        "lr": lr,
                        **breakdown.scalars(),
                    }
                    if out_dir is not None:
                        dump = Path(out_dir) / "divergence.json"
                        dump.parent.mkdir(parents=True, exist_ok=True)
                        dump.write_text(json.dumps(record, indent=2))
                        say(f"non-finite loss; diagnostics written to {dump}")
                    raise DivergenceError(f"non-finite loss at step {global_step}: {record}")
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                global_step += 1
                if steps_left is not None:
                    steps_left -= 1
                logs.append(
                    {
                        "stage": stage_index,
                        "epoch": global_epoch,
                        "step": global_step,
                        "lr": lr,
                        **breakdown.scalars(),
                    }
                )
            if logs and logs[-1]["epoch"] == global_epoch:
                last = logs[-1]
                say(
                    f"stage {stage_index + 1} epoch {global_epoch}: lr {lr:.3e} "
                    f"total {last['total']:.4f} (pixel {last['pixel']:.4f}, "
                    f"bins {last['bins']:.4f}, minmax {last['minmax']:.4f})"
                )
            global_epoch += 1

    checkpoint = build_checkpoint(
        model, optimizer, config, len(config.stages), global_epoch, global_step
    )
    checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        checkpoint_path = save_checkpoint(checkpoint, out_dir / "model.ckpt")
        _write_log_csv(logs, out_dir / "steps.csv")
        say(f"checkpoint written to {checkpoint_path}")
    return TrainResult(model, config, logs, checkpoint, checkpoint_path)


_LOG_FIELDS = ("stage", "epoch", "step", "lr", "total", "pixel", "bins", "minmax")


def _write_log_csv(logs: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(_LOG_FIELDS)]
    for rec in logs:
        lines.append(",".join(f"{rec[k]:.10g}" if isinstance(rec[k], float) else str(rec[k]) for k in _LOG_FIELDS))
    path.write_text("\n".join(lines) + "\n")


@dataclass
class EvaluationResult:
    """Per-sample drift reports plus their means and the model's size."""

    reports: list[DriftReport]
    mean: dict[str, float]
    param_count: int
    use_pst: bool

    def summary(self) -> str:
        lines = [f"samples: {len(self.reports)}"]
        lines.append(f"parameters: {self.param_count} (pst={self.use_pst})")
        lines.extend(f"mean {k} = {v:.6f}" for k, v in self.mean.items())
        return "\n".join(lines)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = list(self.reports[0].as_dict().keys()) if self.reports else list(self.mean.keys())
        lines = ["sample," + ",".join(keys)]
        for i, rep in enumerate(self.reports):
            rec = rep.as_dict()
            lines.append(f"{i}," + ",".join(f"{rec[k]:.10g}" for k in keys))
        lines.append("mean," + ",".join(f"{self.mean[k]:.10g}" for k in keys))
        path.write_text("\n".join(lines) + "\n")
        return path


def evaluate(
    model: DepthEstimator,
    samples: list[SceneSample],
    num_bins: int = DEFAULT_HISTOGRAM_BINS,
    ground_truth_passthrough: bool = False,
) -> EvaluationResult:
    """Score a model on a sample list; optionally inject gt as the prediction.

    The passthrough flag replaces the network output with the ground
    truth itself — a debugging aid whose report must come out all zero.
    """
    if not samples:
        raise ConfigError("evaluation needs at least one sample")
    depth_range = model.config.depth_range
    reports = []
    for sample in samples:
        if ground_truth_passthrough:
            pred = sample.depth
        else:
            pred, _, _ = predict_sample(model, sample.image)
            pred = DepthMap(pred.values, sample.depth.valid_mask)
        reports.append(drift_report(pred, sample.depth, depth_range, num_bins))
    keys = reports[0].as_dict().keys()
    mean = {k: float(np.mean([r.as_dict()[k] for r in reports])) for k in keys}
    return EvaluationResult(
        reports=reports,
        mean=mean,
        param_count=count_parameters(model),
        use_pst=model.config.use_pst,
    )


def diagnose(
    model: DepthEstimator,
    sample: SceneSample,
    out_dir,
    num_bins: int = DEFAULT_HISTOGRAM_BINS,
    ground_truth_passthrough: bool = False,
) -> dict[str, Path]:
    """Render one sample's prediction, error map, histograms, and report.

    Returns the mapping of artifact name to written file path.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    depth_range = model.config.depth_range

    if ground_truth_passthrough:
        pred = sample.depth
    else:
        pred, _, _ = predict_sample(model, sample.image)
        pred = DepthMap(pred.values, sample.depth.valid_mask)

    report = drift_report(pred, sample.depth, depth_range, num_bins)
    err = error_map(pred, sample.depth)
    hist_pred = depth_histogram(pred, depth_range, num_bins)
    hist_gt = depth_histogram(sample.depth, depth_range, num_bins)

    paths: dict[str, Path] = {}

    # predicted depth as a normalized grayscale PNG
    norm = (pred.values - depth_range.d_min) / depth_range.span
    gray = np.round(np.clip(norm, 0, 1) * 65535).astype(np.uint16)
    paths["depth_png"] = out_dir / "predicted_depth.png"
    Image.fromarray(gray).save(paths["depth_png"])

    # signed error map on a diverging scale (red = predicted too far)
    limit = max(float(np.abs(err).max()), 1e-6)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(err, cmap="RdBu_r", vmin=-limit, vmax=limit)
    ax.set_title("prediction error (m)")
    fig.colorbar(im, ax=ax)
    paths["error_png"] = out_dir / "error_map.png"
    fig.savefig(paths["error_png"], dpi=120, bbox_inches="tight")
    plt.close(fig)

    # overlaid histograms: CSV with one row per bin, plus a plot
    paths["histogram_csv"] = out_dir / "histograms.csv"
    rows = ["bin_lo,bin_hi,gt_mass,pred_mass"]
    for k in range(num_bins):
        rows.append(
            f"{hist_gt.edges[k]:.10g},{hist_gt.edges[k + 1]:.10g},"
            f"{hist_gt.mass[k]:.10g},{hist_pred.mass[k]:.10g}"
        )
    paths["histogram_csv"].write_text("\n".join(rows) + "\n")

    fig, ax = plt.subplots(figsize=(6, 4))
    centers = 0.5 * (hist_gt.edges[:-1] + hist_gt.edges[1:])
    ax.step(centers, hist_gt.mass, where="mid", label="ground truth", color="tab:green")
    ax.step(centers, hist_pred.mass, where="mid", label="predicted", color="tab:red")
    ax.set_xlabel("depth (m)")
    ax.set_ylabel("mass")
    ax.legend()
    paths["histogram_png"] = out_dir / "histograms.png"
    fig.savefig(paths["histogram_png"], dpi=120, bbox_inches="tight")
    plt.close(fig)

    paths["report_txt"] = out_dir / "report.txt"
    paths["report_txt"].write_text(report.to_text() + "\n")
    paths["report_csv"] = out_dir / "report.csv"
    report.write_csv(paths["report_csv"])
    return paths
