"""Dataset ingestion and export.

Covers the SemanticKITTI binary formats (scan: 4 float32 per point; label:
uint32 with the semantic class in the low 16 bits), the class-remap table,
train/validation sequence splits, a deterministic synthetic-scene generator
for desk-scale experiments, and ASCII PLY export for visual inspection.
"""

from __future__ import annotations

import importlib.resources
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud

IGNORE_LABEL = -1
SCAN_RECORD_BYTES = 16
LABEL_RECORD_BYTES = 4

TRAIN_SEQUENCES = ("00", "01", "02", "03", "04", "05", "06", "07", "09", "10")
VAL_SEQUENCES = ("08",)


# ------------------------------------------------------------------ remap

class LabelRemap:
    """Raw label ids to contiguous train ids and back.

    Built from whitespace-delimited "raw_id train_id name" lines; '#' starts
    a comment. Train ids must cover 0..n_classes-1 contiguously, with -1 for
    ignored classes. The smallest raw id per train id is canonical: it names
    the class and is what the inverse map emits.
    """

    def __init__(self, rows: list[tuple[int, int, str]]):
        if not rows:
            raise ValueError("remap table is empty")
        train_ids = sorted({t for _, t, _ in rows if t != IGNORE_LABEL})
        if not train_ids:
            raise ValueError("remap table defines no training classes")
        if train_ids != list(range(len(train_ids))):
            raise ValueError(f"train ids not contiguous from 0: {train_ids}")
        self.n_classes = len(train_ids)

        self._to_train: dict[int, int] = {}
        canonical: dict[int, tuple[int, str]] = {}
        for raw, train, name in rows:
            if raw < 0:
                raise ValueError(f"raw id must be non-negative, got {raw}")
            if raw in self._to_train:
                raise ValueError(f"duplicate raw id {raw} in remap table")
            self._to_train[raw] = train
            if train != IGNORE_LABEL:
                if train not in canonical or raw < canonical[train][0]:
                    canonical[train] = (raw, name)
        self._to_raw = np.array([canonical[t][0] for t in range(self.n_classes)],
                                dtype=np.int64)
        self.class_names = [canonical[t][1] for t in range(self.n_classes)]

        # dense lookup: raw id -> train id, -2 marking ids absent from the table
        max_raw = max(self._to_train)
        self._lookup = np.full(max_raw + 1, -2, dtype=np.int64)
        for raw, train in self._to_train.items():
            self._lookup[raw] = train

    def to_train_ids(self, raw: np.ndarray) -> np.ndarray:
        """Map raw ids to train ids; ids missing from the table become the
        ignore id, with one warning stating how many were unknown."""
        raw = np.asarray(raw, dtype=np.int64)
        clipped = np.clip(raw, 0, len(self._lookup) - 1)
        out = self._lookup[clipped]
        out[clipped != raw] = -2
        unknown = out == -2
        n_unknown = int(unknown.sum())
        if n_unknown:
            warnings.warn(f"{n_unknown} labels had raw ids not in the remap "
                          "table; mapped to ignore")
            out[unknown] = IGNORE_LABEL
        return out

    def to_raw_ids(self, train: np.ndarray) -> np.ndarray:
        """Inverse map to canonical raw ids; the ignore id maps to raw 0."""
        train = np.asarray(train, dtype=np.int64)
        if train.size and (train.min() < IGNORE_LABEL or train.max() >= self.n_classes):
            raise ValueError(f"train ids out of range [-1, {self.n_classes})")
        out = np.zeros_like(train)
        valid = train != IGNORE_LABEL
        out[valid] = self._to_raw[train[valid]]
        return out


def load_remap(path: str) -> LabelRemap:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{line_no}: expected 'raw train name', "
                                 f"got {text!r}")
            rows.append((int(parts[0]), int(parts[1]), parts[2]))
    return LabelRemap(rows)


def default_remap() -> LabelRemap:
    """The SemanticKITTI 19-class remap shipped with the package."""
    ref = importlib.resources.files("cloudseg") / "semantic_kitti_remap.txt"
    with importlib.resources.as_file(ref) as path:
        return load_remap(str(path))


# ---------------------------------------------------------------- scan files

def read_kitti_scan(path: str) -> PointCloud:
    """Read packed (x, y, z, intensity) float32 records. The feature vector
    is [intensity, range] with range the distance to the sensor origin."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) % SCAN_RECORD_BYTES != 0:
        raise ValueError(f"{path}: corrupt scan, {len(data)} bytes is not a "
                         f"multiple of {SCAN_RECORD_BYTES}")
    records = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    positions = records[:, :3]
    rng_feature = np.linalg.norm(positions, axis=1)
    features = np.stack([records[:, 3], rng_feature], axis=1)
    return PointCloud(positions=positions, features=features)


def write_kitti_scan(path: str, positions: np.ndarray, intensity: np.ndarray):
    positions = np.asarray(positions, dtype=np.float64)
    intensity = np.asarray(intensity, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValueError("write_kitti_scan: positions must be (N, 3)")
    if intensity.shape != (positions.shape[0],):
        raise ValueError("write_kitti_scan: intensity must be (N,)")
    records = np.concatenate([positions, intensity[:, None]], axis=1)
    with open(path, "wb") as fh:
        fh.write(records.astype("<f4").tobytes())


def read_kitti_labels(path: str, remap: LabelRemap,
                      expected_count: int | None = None) -> np.ndarray:
    """Read uint32 label records, keep the semantic low 16 bits, and remap
    to train ids. expected_count guards against scan/label pair mismatch."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) % LABEL_RECORD_BYTES != 0:
        raise ValueError(f"{path}: corrupt label file, {len(data)} bytes is "
                         f"not a multiple of {LABEL_RECORD_BYTES}")
    raw = np.frombuffer(data, dtype="<u4")
    if expected_count is not None and len(raw) != expected_count:
        raise ValueError(f"{path}: {len(raw)} labels for {expected_count} "
                         "points; scan/label pair mismatch")
    semantic = (raw & 0xFFFF).astype(np.int64)
    return remap.to_train_ids(semantic)


def write_kitti_labels(path: str, raw_ids: np.ndarray):
    raw_ids = np.asarray(raw_ids)
    if raw_ids.ndim != 1 or (raw_ids.size and raw_ids.min() < 0):
        raise ValueError("write_kitti_labels: raw ids must be 1-D non-negative")
    with open(path, "wb") as fh:
        fh.write(raw_ids.astype("<u4").tobytes())


# ------------------------------------------------------------------ manifest

@dataclass
class DatasetManifest:
    """Scan/label path pairs under a SemanticKITTI-layout root, split into
    the standard train (00-10 minus 08) and validation (08) sequences."""

    root: str
    remap: LabelRemap = field(default_factory=default_remap)

    def __post_init__(self):
        seq_dir = os.path.join(self.root, "sequences")
        if not os.path.isdir(seq_dir):
            raise ValueError(f"{self.root}: no sequences/ directory")
        self.train_pairs = self._collect(seq_dir, TRAIN_SEQUENCES)
        self.val_pairs = self._collect(seq_dir, VAL_SEQUENCES)

    @staticmethod
    def _collect(seq_dir: str, sequences) -> list[tuple[str, str]]:
        pairs = []
        for seq in sequences:
            scan_dir = os.path.join(seq_dir, seq, "velodyne")
            if not os.path.isdir(scan_dir):
                continue
            label_dir = os.path.join(seq_dir, seq, "labels")
            for name in sorted(os.listdir(scan_dir)):
                if not name.endswith(".bin"):
                    continue
                scan_path = os.path.join(scan_dir, name)
                label_path = os.path.join(label_dir, name[:-4] + ".label")
                if not os.path.isfile(label_path):
                    raise ValueError(f"{scan_path}: no matching label file")
                pairs.append((scan_path, label_path))
        return pairs

    def pairs(self, split: str) -> list[tuple[str, str]]:
        if split == "train":
            return self.train_pairs
        if split == "val":
            return self.val_pairs
        raise ValueError(f"unknown split {split!r}, expected 'train' or 'val'")


# ------------------------------------------------------------ synthetic scene

@dataclass
class SceneSpec:
    """Recipe for a deterministic labeled toy scene.

    densities are points per unit surface area, keyed by structure kind.
    Classes: plane 0, poles 1, boxes 2, walls 3. extent is the half-width of
    the square ground footprint.
    """

    densities: dict = field(default_factory=lambda: {
        "plane": 700.0, "poles": 700.0, "boxes": 700.0})
    extent: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    KINDS = ("plane", "poles", "boxes", "walls")

    def __post_init__(self):
        unknown = set(self.densities) - set(self.KINDS)
        if unknown:
            raise ValueError(f"unknown scene kinds: {sorted(unknown)}")
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if sum(self.densities.values()) <= 0:
            raise ValueError("at least one density must be positive")


def scene_preset(kind: str, seed: int = 0) -> SceneSpec:
    """Named desk-scale scenes of roughly 3000 points.

    two_class: ground plane (0) with poles (1). three_class additionally
    scatters boxes (2), whose vertical faces meet the ground in sharp
    label boundaries.
    """
    if kind == "two_class":
        densities = {"plane": 600.0, "poles": 1400.0}
    elif kind == "three_class":
        densities = {"plane": 500.0, "poles": 1200.0, "boxes": 1300.0}
    else:
        raise ValueError(f"unknown scene preset {kind!r}; "
                         "choose two_class or three_class")
    return SceneSpec(densities=densities, seed=seed)


def _sample_rect(rng, corner, edge_u, edge_v, density):
    # corner (3,), edges (3,): parallelogram patch sampled uniformly
    area = np.linalg.norm(np.cross(edge_u, edge_v))
    n = max(1, int(round(density * area)))
    u = rng.random((n, 1))
    v = rng.random((n, 1))
    return corner + u * edge_u + v * edge_v


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Build a labeled scene: a ground plane with vertical poles, boxes, and
    optional boundary walls. Structure footprints are carved out of the
    plane with a clearance margin so class membership is geometrically
    unambiguous. Features are [height, range]. Deterministic per spec."""
    rng = np.random.default_rng(spec.seed)
    e = spec.extent
    chunks: list[np.ndarray] = []
    labels: list[np.ndarray] = []

    pole_radius = 0.06 * e
    pole_height = 0.7 * e
    clearance = 0.05 * e

    # structure layout: non-overlapping sites for poles and boxes
    n_poles = 2 if spec.densities.get("poles", 0) > 0 else 0
    n_boxes = 2 if spec.densities.get("boxes", 0) > 0 else 0
    sites = []
    margin = 0.35 * e
    while len(sites) < n_poles + n_boxes:
        p = rng.uniform(-e + margin, e - margin, size=2)
        if all(np.linalg.norm(p - q) > 0.55 * e for q in sites):
            sites.append(p)
    pole_sites = sites[:n_poles]
    box_sites = sites[n_poles:]
    box_half = np.array([0.12 * e, 0.10 * e])
    box_height = 0.3 * e

    d = spec.densities.get("poles", 0.0)
    if d > 0:
        for cx, cy in pole_sites:
            area = 2.0 * np.pi * pole_radius * pole_height
            n = max(1, int(round(d * area)))
            theta = rng.random(n) * 2.0 * np.pi
            z = rng.random(n) * pole_height
            pts = np.stack([cx + pole_radius * np.cos(theta),
                            cy + pole_radius * np.sin(theta), z], axis=1)
            chunks.append(pts)
            labels.append(np.full(n, 1))

    d = spec.densities.get("boxes", 0.0)
    if d > 0:
        for cx, cy in box_sites:
            hx, hy = box_half
            lo = np.array([cx - hx, cy - hy, 0.0])
            ex = np.array([2 * hx, 0, 0])
            ey = np.array([0, 2 * hy, 0])
            ez = np.array([0, 0, box_height])
            faces = [
                (lo + ez, ex, ey),                # top
                (lo, ex, ez), (lo + ey, ex, ez),  # front/back
                (lo, ey, ez), (lo + ex, ey, ez),  # left/right
            ]
            for corner, eu, ev in faces:
                pts = _sample_rect(rng, corner, eu, ev, d)
                chunks.append(pts)
                labels.append(np.full(len(pts), 2))

    d = spec.densities.get("walls", 0.0)
    if d > 0:
        wall_h = 0.4 * e
        for corner, eu in (
            (np.array([-e, e, 0.0]), np.array([2 * e, 0, 0])),   # +y edge
            (np.array([e, -e, 0.0]), np.array([0, 2 * e, 0])),   # +x edge
        ):
            pts = _sample_rect(rng, corner, eu, np.array([0, 0, wall_h]), d)
            chunks.append(pts)
            labels.append(np.full(len(pts), 3))

    d = spec.densities.get("plane", 0.0)
    if d > 0:
        n = max(1, int(round(d * (2 * e) ** 2)))
        xy = rng.uniform(-e, e, size=(n, 2))
        keep = np.ones(n, dtype=bool)
        for cx, cy in pole_sites:
            keep &= np.linalg.norm(xy - [cx, cy], axis=1) > pole_radius + clearance
        for cx, cy in box_sites:
            inside = (np.abs(xy[:, 0] - cx) < box_half[0] + clearance) \
                & (np.abs(xy[:, 1] - cy) < box_half[1] + clearance)
            keep &= ~inside
        xy = xy[keep]
        pts = np.concatenate([xy, np.zeros((len(xy), 1))], axis=1)
        chunks.append(pts)
        labels.append(np.zeros(len(pts), dtype=np.int64))

    positions = np.concatenate(chunks, axis=0)
    all_labels = np.concatenate(labels).astype(np.int64)
    if spec.noise_sigma > 0:
        positions = positions + rng.normal(0.0, spec.noise_sigma, positions.shape)
    order = rng.permutation(len(positions))
    positions = positions[order]
    all_labels = all_labels[order]
    features = np.stack([positions[:, 2], np.linalg.norm(positions, axis=1)],
                        axis=1)
    return PointCloud(positions=positions, features=features, labels=all_labels)


# --------------------------------------------------------------------- PLY

# fixed palette for up to 20 classes; the ignore label renders black
_PALETTE = np.array([
    (245, 150, 100), (245, 230, 100), (150, 60, 30), (180, 30, 80),
    (255, 0, 0), (30, 30, 255), (200, 40, 255), (90, 30, 150),
    (255, 0, 255), (255, 150, 255), (75, 0, 75), (75, 0, 175),
    (0, 200, 255), (50, 120, 255), (0, 175, 0), (0, 60, 135),
    (80, 240, 150), (150, 240, 255), (0, 0, 255), (255, 255, 50),
], dtype=np.uint8)


def write_ply(cloud: PointCloud, values: np.ndarray, path: str):
    """ASCII PLY export. Integer values are treated as class labels and
    colored from a fixed palette; float values are written as a scalar
    property (for weight or score heat maps)."""
    values = np.asarray(values)
    n = len(cloud.positions)
    if values.shape != (n,):
        raise ValueError(f"write_ply: values must be ({n},), got {values.shape}")
    as_labels = np.issubdtype(values.dtype, np.integer)
    lines = ["ply", "format ascii 1.0", f"element vertex {n}",
             "property float x", "property float y", "property float z"]
    if as_labels:
        lines += ["property uchar red", "property uchar green",
                  "property uchar blue"]
    else:
        lines += ["property float scalar"]
    lines.append("end_header")
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
            for i in range(n):
                x, y, z = cloud.positions[i]
                if as_labels:
                    v = int(values[i])
                    r, g, b = (0, 0, 0) if v < 0 else _PALETTE[v % len(_PALETTE)]
                    fh.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n")
                else:
                    fh.write(f"{x:.6f} {y:.6f} {z:.6f} {values[i]:.6f}\n")
    except OSError as exc:
        raise OSError(f"write_ply: cannot write {path}: {exc}") from exc
