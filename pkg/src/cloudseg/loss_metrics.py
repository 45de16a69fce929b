"""Boundary-aware weighted cross entropy and segmentation metrics.

Each point's loss weight grows with the number of nearby points carrying a
different label, so class boundaries count for more than the easy interiors.
Points labeled -1 are ignored everywhere: they get no weight, contribute no
gradient, and are dropped from the confusion matrix.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .geometry import knn_neighbors

IGNORE_LABEL = -1
PROB_FLOOR = 1e-12


def pga_score(positions: np.ndarray, labels: np.ndarray, k: int = 16) -> np.ndarray:
    """Per-point boundary score: how many of the k nearest neighbors carry a
    different label. Range [0, k]; 0 in label-homogeneous regions.

    positions: (N, 3). labels: (N,) ints, -1 = unlabeled. Unlabeled points
    score 0, and unlabeled neighbors are not counted as disagreements.
    """
    positions = np.asarray(positions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (positions.shape[0],):
        raise ValueError("pga_score: labels must be (N,) matching positions")
    n = positions.shape[0]
    if k < 1:
        raise ValueError("pga_score: k must be >= 1")
    if n <= 1:
        return np.zeros(n, dtype=np.int64)

    k_eff = min(k, n - 1)
    index = knn_neighbors(positions, k_eff)  # uniform k_eff per point, self excluded
    neighbor_ids = index.indices.reshape(n, k_eff)
    neighbor_labels = labels[neighbor_ids]
    diff = (neighbor_labels != labels[:, None]) & (neighbor_labels != IGNORE_LABEL)
    score = diff.sum(axis=1).astype(np.int64)
    score[labels == IGNORE_LABEL] = 0
    return score


def pga_weights(score: np.ndarray, eta: float = 1.0, theta: float = 1.0 / 16.0) -> np.ndarray:
    """Affine map from boundary score to loss weight: eta + theta * score.
    Defaults give weight 1 in homogeneous regions and 2 at a full boundary."""
    score = np.asarray(score, dtype=np.float64)
    if eta < 0 or theta < 0:
        raise ValueError("pga_weights: eta and theta must be non-negative")
    return eta + theta * score


def pga_cross_entropy(logits: ad.Tensor, labels: np.ndarray,
                      weights: np.ndarray) -> ad.Tensor:
    """Weighted softmax cross entropy as one fused graph node.

    loss = -(1/N_valid) * sum_i w_i * log(p_{i, y_i}) over labeled points.
    The probability is floored at 1e-12 inside the log (forward value only);
    the backward rule is the exact softmax-CE gradient
        d loss / d logits_i = (w_i / N_valid) * (softmax_i - onehot_i)
    and labeled/unlabeled masking zeroes ignored rows.
    """
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if logits.values.ndim != 2:
        raise ValueError(f"pga_cross_entropy: logits must be (N, C), got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,) or weights.shape != (n,):
        raise ValueError("pga_cross_entropy: labels and weights must be (N,)")
    valid = labels != IGNORE_LABEL
    if labels[valid].size and (labels[valid].min() < 0 or labels[valid].max() >= c):
        raise ValueError(f"pga_cross_entropy: labels out of range [0, {c})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("pga_cross_entropy: no labeled points")

    shifted = logits.values - np.max(logits.values, axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    rows = np.nonzero(valid)[0]
    p_true = probs[rows, labels[rows]]
    loss_value = float(np.sum(-weights[rows] * np.log(np.maximum(p_true, PROB_FLOOR)))
                       / n_valid)

    def backward_fn(g):
        d = np.zeros_like(logits.values)
        d[rows] = probs[rows] * (weights[rows] / n_valid)[:, None]
        d[rows, labels[rows]] -= weights[rows] / n_valid
        logits.accumulate(float(g) * d)

    return ad.make_op(np.array(loss_value), (logits,), backward_fn, "pga_cross_entropy")


# -------------------------------------------------------------------- metrics

def confusion_matrix(predicted: np.ndarray, true: np.ndarray,
                     n_classes: int) -> np.ndarray:
    """counts[t, p] = points with true label t predicted as p. Pairs whose
    true label is -1 are dropped."""
    predicted = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if predicted.shape != true.shape or predicted.ndim != 1:
        raise ValueError("confusion_matrix: predicted and true must be equal-length 1-D")
    keep = true != IGNORE_LABEL
    predicted, true = predicted[keep], true[keep]
    if predicted.size and (predicted.min() < 0 or predicted.max() >= n_classes
                           or true.max() >= n_classes):
        raise ValueError(f"confusion_matrix: labels out of range [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true, predicted), 1)
    return counts


def iou_per_class(counts: np.ndarray) -> np.ndarray:
    """Intersection over union per class; nan where the class never appears
    in either prediction or ground truth."""
    counts = np.asarray(counts)
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    out = np.full(len(counts), np.nan)
    seen = denom > 0
    out[seen] = tp[seen] / denom[seen]
    return out


def mean_iou(counts: np.ndarray) -> float:
    """Mean IoU over classes that appear at all; nan if none do."""
    iou = iou_per_class(counts)
    seen = ~np.isnan(iou)
    if not seen.any():
        return float("nan")
    return float(iou[seen].mean())


def overall_accuracy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return float("nan")
    return float(np.diag(counts).sum() / total)


def format_iou_table(counts: np.ndarray, class_names: list[str] | None = None) -> str:
    """Per-class lines of (name, IoU, support count), then an mIoU line."""
    n = len(counts)
    if class_names is None:
        class_names = [f"class_{i}" for i in range(n)]
    if len(class_names) != n:
        raise ValueError("format_iou_table: one name per class required")
    iou = iou_per_class(counts)
    support = counts.sum(axis=1)
    width = max(len(name) for name in class_names + ["mIoU"])
    lines = [f"{'class':<{width}}  {'IoU':>5}  {'support':>8}"]
    for name, value, count in zip(class_names, iou, support):
        shown = "   --" if np.isnan(value) else f"{100.0 * value:5.1f}"
        lines.append(f"{name:<{width}}  {shown}  {count:>8d}")
    lines.append(f"{'mIoU':<{width}}  {100.0 * mean_iou(counts):5.1f}")
    return "\n".join(lines) + "\n"
