"""Training loop, sphere-crop sampling, voting inference, and ablations.

Training is single-threaded and fully deterministic per (config, data):
one random sphere crop per step, boundary-weighted cross-entropy, SGD with
momentum (or Adam) with a single step-decay. Inference tiles spheres over
the scene so every point is covered at least `votes` times and averages
the softmax probabilities before the argmax.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .config import ConfigError, NetworkConfig
from .data_io import DatasetManifest, SceneSpec, generate_scene, read_kitti_labels, read_kitti_scan
from .geometry import PointCloud
from .loss_metrics import (
    IGNORE_LABEL,
    confusion_matrix,
    format_iou_table,
    iou_per_class,
    mean_iou,
    overall_accuracy,
    pga_cross_entropy,
    pga_score,
    pga_weights,
)
from .network import Model, build_pyramid

FINAL_CHECKPOINT = "model.ckpt"
LOG_NAME = "train_log.tsv"


# ----------------------------------------------------------------- data feed

class CloudSource:
    """Uniform access to training clouds: in-memory, synthetic, or on-disk."""

    def __init__(self, clouds=None, pairs=None, remap=None):
        self._clouds = clouds
        self._pairs = pairs
        self._remap = remap

    @classmethod
    def resolve(cls, source, split: str = "train") -> "CloudSource":
        if isinstance(source, CloudSource):
            return source
        if isinstance(source, PointCloud):
            return cls(clouds=[source])
        if isinstance(source, SceneSpec):
            return cls(clouds=[generate_scene(source)])
        if isinstance(source, DatasetManifest):
            return cls(pairs=source.pairs(split), remap=source.remap)
        if isinstance(source, (list, tuple)):
            if all(isinstance(c, PointCloud) for c in source):
                return cls(clouds=list(source))
        raise TypeError(f"cannot build a cloud source from {type(source).__name__}")

    def __len__(self) -> int:
        return len(self._clouds) if self._clouds is not None else len(self._pairs)

    def get(self, index: int) -> PointCloud:
        if self._clouds is not None:
            return self._clouds[index]
        scan_path, label_path = self._pairs[index]
        scan = read_kitti_scan(scan_path)
        labels = read_kitti_labels(label_path, self._remap,
                                   expected_count=len(scan))
        return PointCloud(scan.positions, scan.features, labels)

    def all_clouds(self) -> list[PointCloud]:
        return [self.get(i) for i in range(len(self))]


def sphere_crop(cloud: PointCloud, center, radius: float) -> PointCloud:
    """Points within `radius` of `center`, preserving feature/label rows."""
    center = np.asarray(center, dtype=np.float64).reshape(1, 3)
    d2 = np.sum((cloud.positions - center) ** 2, axis=1)
    mask = d2 <= radius * radius
    labels = cloud.labels[mask] if cloud.labels is not None else None
    return PointCloud(cloud.positions[mask], cloud.features[mask], labels)


def sample_training_crop(cloud: PointCloud, config: NetworkConfig,
                         rng: np.random.Generator):
    """Crop around a random labeled point; retry until the crop is usable."""
    labeled = np.flatnonzero(cloud.labels != IGNORE_LABEL)
    if labeled.size == 0:
        raise ValueError("training cloud has no labeled points")
    for _ in range(100):
        center = cloud.positions[rng.choice(labeled)]
        crop = sphere_crop(cloud, center, config.sphere_radius)
        if len(crop) >= config.min_crop_points and \
                np.any(crop.labels != IGNORE_LABEL):
            return crop, center
    raise RuntimeError(f"no usable crop after 100 draws (radius "
                       f"{config.sphere_radius}, min {config.min_crop_points} "
                       "points); check the sphere radius against the scene")


# ----------------------------------------------------------------- optimizer

class Optimizer:
    """SGD with momentum or Adam over named parameters, with one lr drop."""

    def __init__(self, settings, params: dict[str, ad.Tensor]):
        self.settings = settings
        self.params = params
        if settings.kind == "sgd":
            self._velocity = {k: np.zeros_like(t.values)
                             for k, t in params.items()}
        elif settings.kind == "adam":
            self._m = {k: np.zeros_like(t.values) for k, t in params.items()}
            self._v = {k: np.zeros_like(t.values) for k, t in params.items()}
            self._t = 0
        else:
            raise ConfigError(f"unknown optimizer kind {settings.kind!r}")

    def lr_at(self, step: int) -> float:
        s = self.settings
        drop_at = int(np.floor(s.decay_at * s.steps))
        return s.lr * (s.decay_factor if step >= drop_at and s.steps > 0 else 1.0)

    def step(self, step_index: int):
        lr = self.lr_at(step_index)
        if self.settings.kind == "sgd":
            mu = self.settings.momentum
            for name, t in self.params.items():
                v = self._velocity[name]
                v *= mu
                v -= lr * t.grad
                t.values = t.values + v
        else:
            self._t += 1
            b1, b2, eps = 0.9, 0.999, 1e-8
            for name, t in self.params.items():
                g = t.grad
                self._m[name] = b1 * self._m[name] + (1 - b1) * g
                self._v[name] = b2 * self._v[name] + (1 - b2) * g * g
                m_hat = self._m[name] / (1 - b1 ** self._t)
                v_hat = self._v[name] / (1 - b2 ** self._t)
                t.values = t.values - lr * m_hat / (np.sqrt(v_hat) + eps)


# ------------------------------------------------------------------ TrainLog

@dataclass
class TrainLog:
    """Append-only per-step records, serialized as tab-separated text."""

    rows: list = field(default_factory=list)

    def append(self, step: int, loss: float, lr: float, seconds: float,
               val_miou: float | None = None):
        self.rows.append((step, loss, lr, seconds, val_miou))

    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows], dtype=np.float64)

    def to_tsv(self) -> str:
        lines = ["step\tloss\tlr\tseconds\tval_miou"]
        for step, loss, lr, seconds, val in self.rows:
            val_text = "" if val is None else f"{val:.6f}"
            lines.append(f"{step}\t{loss!r}\t{lr!r}\t{seconds:.4f}\t{val_text}")
        return "\n".join(lines) + "\n"

    def write(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_tsv())


# ------------------------------------------------------------------ training

def _crop_loss(model: Model, crop: PointCloud, config: NetworkConfig,
               training: bool = True) -> ad.Tensor:
    pyramid = build_pyramid(crop, config)
    logits = model.forward(pyramid, training=training)
    if config.pga.enabled:
        score = pga_score(crop.positions, crop.labels, k=config.pga.k)
        weights = pga_weights(score, eta=config.pga.eta, theta=config.pga.theta)
    else:
        weights = np.ones(len(crop))
    return pga_cross_entropy(logits, crop.labels, weights)


def train(config: NetworkConfig, source, out_dir: str | None = None,
          val_source=None) -> tuple[Model, TrainLog]:
    """Run the configured number of steps; returns the model and its log.

    When out_dir is given, writes the TSV log, periodic checkpoints, and a
    final checkpoint (written even for 0 steps, so it equals the
    initialization). When val_source is given, validation mIoU is recorded
    at checkpoint steps and after the last step.
    """
    feed = CloudSource.resolve(source)
    if len(feed) == 0:
        raise ValueError("train: empty data source")
    val_clouds = None
    if val_source is not None:
        val_clouds = CloudSource.resolve(val_source, split="val").all_clouds()

    model = Model(config)
    optimizer = Optimizer(config.optimizer, model.named_parameters())
    rng = np.random.default_rng(config.seed)
    log = TrainLog()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    settings = config.optimizer
    for step in range(settings.steps):
        started = time.perf_counter()
        cloud_index = int(rng.integers(len(feed)))
        crop, center = sample_training_crop(feed.get(cloud_index), config, rng)

        model.zero_grads()
        loss = _crop_loss(model, crop, config, training=True)
        loss_value = float(loss.values)
        if not np.isfinite(loss_value):
            if out_dir is not None:
                log.write(os.path.join(out_dir, LOG_NAME))
            raise RuntimeError(
                f"non-finite loss {loss_value} at step {step} "
                f"(cloud {cloud_index}, crop center {center.tolist()}, "
                f"{len(crop)} points)")
        ad.backward(loss)
        optimizer.step(step)

        is_checkpoint = settings.checkpoint_every > 0 and \
            (step + 1) % settings.checkpoint_every == 0
        val_miou = None
        if val_clouds is not None and (is_checkpoint or step == settings.steps - 1):
            val_miou = evaluate_clouds(config, model, val_clouds)["miou"]
        log.append(step, loss_value, optimizer.lr_at(step),
                   time.perf_counter() - started, val_miou)
        if out_dir is not None and is_checkpoint:
            ad.save_checkpoint(
                os.path.join(out_dir, f"model_{step + 1:06d}.ckpt"),
                model.state_dict())

    if out_dir is not None:
        ad.save_checkpoint(os.path.join(out_dir, FINAL_CHECKPOINT),
                           model.state_dict())
        log.write(os.path.join(out_dir, LOG_NAME))
    return model, log


# ----------------------------------------------------------------- inference

def tile_centers(positions: np.ndarray, radius: float, votes: int) -> np.ndarray:
    """Deterministic sphere centers covering every point `votes` times.

    Each pass lays a grid of cell size `radius` (shifted diagonally by
    pass/votes cells) and keeps the occupied cells' centers. A cell's
    half-diagonal is ~0.866 * radius, so each pass covers every point once.
    """
    if len(positions) == 0:
        raise ValueError("tile_centers: no points")
    centers = []
    for v in range(votes):
        origin = positions.min(axis=0) - (v / votes) * radius
        cells = np.unique(np.floor((positions - origin) / radius).astype(np.int64),
                          axis=0)
        centers.append(origin + (cells + 0.5) * radius)
    return np.concatenate(centers, axis=0)


def vote_probabilities(model: Model, cloud: PointCloud,
                       config: NetworkConfig) -> tuple[np.ndarray, np.ndarray]:
    """Averaged per-point class probabilities over overlapping sphere crops.

    Returns (probs (N, n_classes), cover_counts (N,)). Every point must be
    covered; renormalization keeps each row a distribution.
    """
    n = len(cloud)
    accumulated = np.zeros((n, config.n_classes))
    covered = np.zeros(n, dtype=np.int64)
    for center in tile_centers(cloud.positions, config.sphere_radius,
                               config.votes):
        d2 = np.sum((cloud.positions - center) ** 2, axis=1)
        mask = d2 <= config.sphere_radius ** 2
        if not np.any(mask):
            continue
        crop = PointCloud(cloud.positions[mask], cloud.features[mask])
        logits = model.forward(build_pyramid(crop, config), training=False)
        probs = ad.softmax_lastdim(logits).values
        accumulated[mask] += probs
        covered[mask] += 1
    if np.any(covered == 0):
        missing = int((covered == 0).sum())
        raise RuntimeError(f"voting left {missing} points uncovered; "
                           "the sphere tiling no longer spans the cloud")
    probs = accumulated / covered[:, None]
    probs /= probs.sum(axis=1, keepdims=True)
    return probs, covered


def evaluate_clouds(config: NetworkConfig, model: Model, clouds,
                    class_names=None) -> dict:
    """Voting inference over full clouds; confusion-derived metrics."""
    counts = np.zeros((config.n_classes, config.n_classes), dtype=np.int64)
    for cloud in clouds:
        probs, _ = vote_probabilities(model, cloud, config)
        predicted = np.argmax(probs, axis=1)
        if cloud.labels is not None:
            counts += confusion_matrix(cloud.labels, predicted,
                                       config.n_classes)
    return {
        "counts": counts,
        "iou": iou_per_class(counts),
        "miou": mean_iou(counts),
        "accuracy": overall_accuracy(counts),
        "table": format_iou_table(counts, class_names),
    }


def evaluate(config: NetworkConfig, checkpoint_path: str, source,
             split: str = "val", class_names=None) -> dict:
    """Load a checkpoint and run voting evaluation over a data source."""
    model = Model(config)
    model.load_state_dict(ad.load_checkpoint(checkpoint_path))
    clouds = CloudSource.resolve(source, split=split).all_clouds()
    return evaluate_clouds(config, model, clouds, class_names)


def predict_cloud(model: Model, cloud: PointCloud,
                  config: NetworkConfig) -> np.ndarray:
    """Voted per-point class ids for one cloud."""
    probs, _ = vote_probabilities(model, cloud, config)
    return np.argmax(probs, axis=1)


# ----------------------------------------------------------------- ablations

def ablation_rows(base: NetworkConfig) -> list[tuple[str, NetworkConfig]]:
    """Component ladder plus the three query-key combine variants.

    Every variant shares the base seed and data so differences come from
    the toggles alone. The pga-off and theta=0 rows are distinct configs
    that must train identically (the loss path is shared).
    """
    def variant(**kw) -> NetworkConfig:
        pga_kw = {}
        for key in ("enabled", "theta"):
            if key in kw:
                pga_kw[key] = kw.pop(key)
        config = replace(base, **kw)
        if pga_kw:
            config = replace(config, pga=replace(config.pga, **pga_kw))
        config.validate()
        return config

    return [
        ("conv_only", variant(use_second_conv=False, use_attention=False,
                              use_global_final=False, enabled=False)),
        ("+second_conv", variant(use_attention=False, use_global_final=False,
                                 enabled=False)),
        ("+local_attention", variant(use_global_final=False, enabled=False)),
        ("+global_final", variant(enabled=False)),
        ("+pga", variant(enabled=True)),
        ("combine_hadamard", variant(combine_op="hadamard")),
        ("combine_add", variant(combine_op="add")),
        ("combine_subtract", variant(combine_op="subtract")),
    ]


def ablate(base: NetworkConfig, source, val_source=None,
           steps: int | None = None) -> list[dict]:
    """Train and evaluate every ablation row on identical data and seed."""
    results = []
    for name, config in ablation_rows(base):
        if steps is not None:
            config = replace(config,
                             optimizer=replace(config.optimizer, steps=steps))
        model, log = train(config, source)
        val = CloudSource.resolve(
            val_source if val_source is not None else source).all_clouds()
        report = evaluate_clouds(config, model, val)
        results.append({"name": name, "config": config, "log": log,
                        "miou": report["miou"], "accuracy": report["accuracy"]})
    return results


def format_ablation_table(results: list[dict]) -> str:
    width = max(len(r["name"]) for r in results)
    lines = [f"{'variant':<{width}}  {'mIoU':>7}  {'acc':>7}"]
    for r in results:
        lines.append(f"{r['name']:<{width}}  {r['miou']:>7.4f}  "
                     f"{r['accuracy']:>7.4f}")
    return "\n".join(lines) + "\n"
