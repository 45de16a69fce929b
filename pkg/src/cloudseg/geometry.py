"""Spatial preprocessing: voxel subsampling, radius search, sphere crops,
upsample maps and kernel-point dispositions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PointCloud:
    """One scan or crop: positions (N, 3), features (N, F), optional labels (N,).

    Labels use -1 for ignored points.
    """

    positions: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must have shape (N, 3)")
        if self.features.ndim != 2 or self.features.shape[0] != self.positions.shape[0]:
            raise ValueError("features must have shape (N, F) matching positions")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain non-finite values")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.positions.shape[0],):
                raise ValueError("labels must have shape (N,)")

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class NeighborIndex:
    """CSR-style neighbor lists: query i's neighbors are
    indices[offsets[i]:offsets[i+1]], each an index into the support set.

    Lists are sorted by (distance, support index).
    """

    offsets: np.ndarray      # (N+1,) int64, monotone, offsets[0] == 0
    indices: np.ndarray      # (total,) int64 into [0, n_supports)
    radius: float
    n_queries: int
    n_supports: int

    def __post_init__(self):
        self.offsets = np.ascontiguousarray(self.offsets, dtype=np.int64)
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        if self.offsets.shape != (self.n_queries + 1,):
            raise ValueError("offsets must have length n_queries + 1")
        if self.offsets[0] != 0 or self.offsets[-1] != len(self.indices):
            raise ValueError("offsets must start at 0 and end at len(indices)")
        if np.any(np.diff(self.offsets) < 0):
            raise ValueError("offsets must be non-decreasing")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= self.n_supports):
            raise ValueError("neighbor index out of support range")

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def query_of_pair(self) -> np.ndarray:
        """Query id for every stored (query, support) pair, (total,)."""
        return np.repeat(np.arange(self.n_queries, dtype=np.int64), self.counts())


@dataclass
class KernelDisposition:
    """Fixed kernel-point arrangement inside a ball, with correlation extent."""

    points: np.ndarray       # (N_k, 3)
    radius: float
    sigma: float

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError("kernel points must have shape (N_k, 3), N_k >= 1")
        norms = np.linalg.norm(self.points, axis=1)
        if not np.any(norms == 0.0):
            raise ValueError("one kernel point must sit at the origin")
        if np.any(norms > self.radius * (1 + 1e-9)):
            raise ValueError("kernel points must lie within the stated radius")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def _cell_keys(positions: np.ndarray, cell: float) -> np.ndarray:
    # integer grid coordinates, shifted so keys are non-negative
    coords = np.floor(positions / cell).astype(np.int64)
    coords -= coords.min(axis=0)
    return coords


def voxel_grid_subsample(cloud: PointCloud, cell: float) -> tuple[PointCloud, NeighborIndex]:
    """Pool a cloud to one point per occupied voxel cell.

    Output positions are cell centroids, features are cell means, labels by
    majority vote (ties to the smallest label id). The returned pool map
    records, per output point, which input points fed it (ascending ids).
    """
    if cell <= 0:
        raise ValueError(f"cell size must be positive, got {cell}")
    n = len(cloud)
    if n == 0:
        empty = NeighborIndex(np.zeros(1, np.int64), np.zeros(0, np.int64), cell, 0, 0)
        return PointCloud(cloud.positions, cloud.features, cloud.labels), empty

    coords = _cell_keys(cloud.positions, cell)
    # lexsort is stable: within a cell, original point order (ascending) is kept
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    sorted_coords = coords[order]
    new_cell = np.ones(n, dtype=bool)
    new_cell[1:] = np.any(sorted_coords[1:] != sorted_coords[:-1], axis=1)
    cell_ids = np.cumsum(new_cell) - 1        # cell id per sorted point
    m = int(cell_ids[-1]) + 1

    starts = np.flatnonzero(new_cell)
    offsets = np.concatenate([starts, [n]]).astype(np.int64)
    counts = np.diff(offsets)

    # unbuffered scatter-add keeps single-member cells bit-exact
    pos_sum = np.zeros((m, 3))
    np.add.at(pos_sum, cell_ids, cloud.positions[order])
    feat_sum = np.zeros((m, cloud.features.shape[1]))
    np.add.at(feat_sum, cell_ids, cloud.features[order])
    positions = pos_sum / counts[:, None]
    features = feat_sum / counts[:, None]

    labels = None
    if cloud.labels is not None:
        labels = _majority_labels(cloud.labels[order], cell_ids, m)

    pool_map = NeighborIndex(offsets, order.astype(np.int64), cell, m, n)
    return PointCloud(positions, features, labels), pool_map


def _majority_labels(sorted_labels: np.ndarray, cell_ids: np.ndarray, m: int) -> np.ndarray:
    # count runs of identical (cell, label) pairs; within a cell, the most
    # frequent label wins and ties fall to the smallest label id
    order = np.lexsort((sorted_labels, cell_ids))
    cells = cell_ids[order]
    labs = sorted_labels[order]
    new_run = np.ones(len(labs), dtype=bool)
    new_run[1:] = (cells[1:] != cells[:-1]) | (labs[1:] != labs[:-1])
    run_starts = np.flatnonzero(new_run)
    run_counts = np.diff(np.concatenate([run_starts, [len(labs)]]))
    run_cells = cells[run_starts]
    run_labs = labs[run_starts]

    out = np.full(m, -2, dtype=np.int64)
    best = np.zeros(m, dtype=np.int64)
    # runs are ordered by (cell, ascending label); strict > keeps the smaller
    # label on ties
    for c, lab, cnt in zip(run_cells, run_labs, run_counts):
        if cnt > best[c]:
            best[c] = cnt
            out[c] = lab
    return out


def radius_neighbors(
    queries: np.ndarray,
    supports: np.ndarray,
    radius: float,
    cap: int = 40,
) -> NeighborIndex:
    """All supports within `radius` of each query, sorted by (distance,
    support index) and truncated to the `cap` nearest.

    A query that coincides with a support includes it at distance zero.
    Uses a uniform hash grid with cell size = radius.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    queries = np.asarray(queries, dtype=np.float64)
    supports = np.asarray(supports, dtype=np.float64)
    nq, ns = len(queries), len(supports)
    if nq == 0 or ns == 0:
        return NeighborIndex(np.zeros(nq + 1, np.int64), np.zeros(0, np.int64), radius, nq, ns)

    inv = 1.0 / radius
    sup_cells = np.floor(supports * inv).astype(np.int64)
    buckets: dict[tuple[int, int, int], list[int]] = {}
    for i, c in enumerate(map(tuple, sup_cells)):
        buckets.setdefault(c, []).append(i)
    bucket_arrays = {c: np.asarray(ids, dtype=np.int64) for c, ids in buckets.items()}

    r2 = radius * radius
    per_query: list[np.ndarray] = []
    counts = np.zeros(nq, dtype=np.int64)
    q_cells = np.floor(queries * inv).astype(np.int64)
    for i in range(nq):
        cx, cy, cz = q_cells[i]
        cand: list[np.ndarray] = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    ids = bucket_arrays.get((cx + dx, cy + dy, cz + dz))
                    if ids is not None:
                        cand.append(ids)
        if not cand:
            per_query.append(np.zeros(0, np.int64))
            continue
        ids = np.concatenate(cand)
        d2 = np.sum((supports[ids] - queries[i]) ** 2, axis=1)
        keep = d2 <= r2
        ids, d2 = ids[keep], d2[keep]
        order = np.lexsort((ids, d2))
        ids = ids[order][:cap]
        per_query.append(ids)
        counts[i] = len(ids)

    offsets = np.zeros(nq + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    indices = np.concatenate(per_query) if per_query else np.zeros(0, np.int64)
    return NeighborIndex(offsets, indices.astype(np.int64), radius, nq, ns)


def _radius_neighbors_bruteforce(queries, supports, radius, cap=40):
    """O(N*M) reference path, kept for benchmarking."""
    queries = np.asarray(queries, dtype=np.float64)
    supports = np.asarray(supports, dtype=np.float64)
    r2 = radius * radius
    lists = []
    for q in queries:
        d2 = np.sum((supports - q) ** 2, axis=1)
        ids = np.flatnonzero(d2 <= r2)
        order = np.lexsort((ids, d2[ids]))
        lists.append(ids[order][:cap])
    counts = np.array([len(l) for l in lists], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    indices = np.concatenate(lists) if lists else np.zeros(0, np.int64)
    return NeighborIndex(offsets, indices.astype(np.int64), radius, len(queries), len(supports))


def knn_neighbors(positions: np.ndarray, k: int) -> NeighborIndex:
    """k nearest *other* points for every point, ties by smallest index.

    Unlike radius_neighbors, the point itself is excluded; used for the
    label-anisotropy score where the self term is always zero.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    k_eff = min(k, max(n - 1, 0))
    lists = []
    block = 512
    for start in range(0, n, block):
        stop = min(start + block, n)
        d2 = np.sum((positions[start:stop, None, :] - positions[None, :, :]) ** 2, axis=2)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        for row in d2:
            if k_eff == 0:
                lists.append(np.zeros(0, np.int64))
                continue
            ids = np.argpartition(row, k_eff - 1)[:k_eff] if k_eff < n else np.arange(n)
            order = np.lexsort((ids, row[ids]))
            lists.append(ids[order].astype(np.int64))
    counts = np.array([len(l) for l in lists], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    indices = np.concatenate(lists) if lists else np.zeros(0, np.int64)
    return NeighborIndex(offsets, indices, np.inf, n, n)


def sample_sphere(
    cloud: PointCloud, center: np.ndarray, radius: float
) -> tuple[PointCloud, np.ndarray]:
    """Points with ||p - center|| <= radius plus their parent-cloud indices."""
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    d2 = np.sum((cloud.positions - center) ** 2, axis=1)
    parent_ids = np.flatnonzero(d2 <= radius * radius).astype(np.int64)
    labels = cloud.labels[parent_ids] if cloud.labels is not None else None
    crop = PointCloud(cloud.positions[parent_ids], cloud.features[parent_ids], labels)
    return crop, parent_ids


def nearest_upsample_map(fine: np.ndarray, coarse: np.ndarray) -> np.ndarray:
    """Index of the closest coarse point for every fine point (ties to the
    smallest coarse index)."""
    fine = np.asarray(fine, dtype=np.float64)
    coarse = np.asarray(coarse, dtype=np.float64)
    if len(coarse) == 0:
        raise ValueError("coarse set must be non-empty")
    out = np.zeros(len(fine), dtype=np.int64)
    block = 1024
    for start in range(0, len(fine), block):
        stop = min(start + block, len(fine))
        d2 = np.sum((fine[start:stop, None, :] - coarse[None, :, :]) ** 2, axis=2)
        out[start:stop] = np.argmin(d2, axis=1)   # argmin takes the first min
    return out


def repulsion_energy(points: np.ndarray) -> float:
    """Sum of inverse pairwise distances; the quantity the kernel layout
    descent minimizes."""
    n = len(points)
    if n < 2:
        return 0.0
    diff = points[:, None, :] - points[None, :, :]
    d = np.sqrt(np.sum(diff ** 2, axis=2))
    iu = np.triu_indices(n, k=1)
    return float(np.sum(1.0 / d[iu]))


def _repulsion_descent(
    points: np.ndarray, radius: float, n_iter: int = 1000, step: float | None = None
) -> tuple[np.ndarray, list[float]]:
    """Fixed-budget projected gradient descent on the inverse-distance energy.

    The first point stays pinned at the origin; the rest move. Backtracking
    halves the step whenever the projected update would raise the energy, so
    the recorded energy trace is non-increasing.
    """
    pts = points.copy()
    n = len(pts)
    if step is None:
        step = 0.05 * radius
    energies = [repulsion_energy(pts)]
    if n < 2:
        return pts, energies

    for _ in range(n_iter):
        diff = pts[:, None, :] - pts[None, :, :]             # (n, n, 3)
        d2 = np.sum(diff ** 2, axis=2)
        np.fill_diagonal(d2, 1.0)
        d = np.sqrt(d2)
        # gradient of sum 1/d_ij wrt point a: sum_b -(p_a - p_b)/d_ab^3
        grad = -np.sum(diff / (d ** 3)[:, :, None], axis=1)
        grad[0] = 0.0

        cur = energies[-1]
        s = step
        accepted = pts
        for _try in range(40):
            trial = pts - s * grad
            trial[0] = 0.0
            norms = np.linalg.norm(trial, axis=1)
            over = norms > radius
            if np.any(over):
                trial[over] *= (radius / norms[over])[:, None]
            e = repulsion_energy(trial)
            if e <= cur:
                accepted, cur = trial, e
                break
            s *= 0.5
        pts = accepted
        energies.append(cur)
    return pts, energies


_UNIT_LAYOUT_CACHE: dict[tuple[int, int], np.ndarray] = {}


def generate_kernel_disposition(
    n_points: int, radius: float, seed: int = 0, sigma_ratio: float = 0.3
) -> KernelDisposition:
    """Kernel layout: one point pinned at the origin, the rest spread by
    pairwise-repulsion descent inside the ball. Deterministic per seed.

    The descent runs on the unit ball and the result is scaled, so the
    layout quality and cost are radius-independent; layouts are cached per
    (n_points, seed) because they are pure functions of those two values.
    """
    if n_points < 1:
        raise ValueError(f"n_points must be >= 1, got {n_points}")
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    key = (n_points, seed)
    unit = _UNIT_LAYOUT_CACHE.get(key)
    if unit is None:
        rng = np.random.default_rng(seed)
        pts = np.zeros((n_points, 3))
        if n_points > 1:
            # uniform in the ball: random direction, radius ~ u^(1/3)
            v = rng.normal(size=(n_points - 1, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            pts[1:] = v * rng.uniform(size=(n_points - 1, 1)) ** (1.0 / 3.0)
            pts, _ = _repulsion_descent(pts, 1.0)
        _UNIT_LAYOUT_CACHE[key] = pts
        unit = pts
    return KernelDisposition(unit * radius, radius, sigma_ratio * radius)
