"""Network building blocks: kernel-point convolution, two-unit multi-scale
fusion, local and global self-attention, encoder and decoder blocks.

Everything operates on one crop at a time. Positions and neighbor indices
are plain arrays (no gradient); features flow through autodiff tensors.
All geometric terms depend on position differences only, so the blocks are
translation invariant under a fixed neighbor structure.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import KernelDisposition, NeighborIndex

COMBINE_OPS = ("hadamard", "add", "subtract")


@dataclass
class ConvUnitParams:
    """One convolution unit: a fixed kernel-point arrangement plus its
    trainable weights, one d_in x d_out matrix per kernel point."""

    disposition: KernelDisposition
    weights: ad.Tensor  # (N_k, d_in, d_out)

    def __post_init__(self):
        if self.weights.values.ndim != 3:
            raise ValueError(f"conv weights must be (N_k, d_in, d_out), "
                             f"got {self.weights.shape}")
        if self.weights.shape[0] != self.disposition.n_points:
            raise ValueError(f"weight tensor first dim {self.weights.shape[0]} "
                             f"!= kernel point count {self.disposition.n_points}")

    @property
    def d_in(self) -> int:
        return self.weights.shape[1]

    @property
    def d_out(self) -> int:
        return self.weights.shape[2]


@dataclass
class AttentionParams:
    """Projections and MLPs for one attention branch.

    Local attention uses all fields; global attention uses only the three
    projections. kappa maps combined query/key scores to attention logits,
    gamma encodes relative positions (3 -> hidden -> d_out).
    """

    w_q: ad.Tensor
    w_k: ad.Tensor
    w_v: ad.Tensor
    kappa: tuple | None = None   # (w1, b1, w2, b2)
    gamma: tuple | None = None   # (w1, b1, w2, b2)
    combine_op: str = "hadamard"

    def __post_init__(self):
        if self.combine_op not in COMBINE_OPS:
            raise ValueError(f"combine_op must be one of {COMBINE_OPS}, "
                             f"got {self.combine_op!r}")


def _mlp2(x: ad.Tensor, weights: tuple) -> ad.Tensor:
    w1, b1, w2, b2 = weights
    hidden = ad.leaky_relu(ad.add(ad.matmul(x, w1), b1))
    return ad.add(ad.matmul(hidden, w2), b2)


# ------------------------------------------------------------- convolution

def kernel_correlation(dp: np.ndarray, disposition: KernelDisposition) -> np.ndarray:
    """Linear correlation of relative positions against each kernel point:
    max(0, 1 - dist/sigma). dp (P, 3) -> (P, N_k)."""
    dist = np.linalg.norm(dp[:, None, :] - disposition.points[None, :, :], axis=2)
    return np.maximum(0.0, 1.0 - dist / disposition.sigma)


def kp_convolution(points: np.ndarray, features: ad.Tensor,
                   neighbors: NeighborIndex, params: ConvUnitParams) -> ad.Tensor:
    """Kernel-point convolution over difference features.

    For each point i: sum over neighbors j and kernel points k of
    corr(p_j - p_i, kernel_k) * (f_j - f_i) @ W_k. Constant features produce
    exactly zero output; empty neighborhoods produce zero rows.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if neighbors.n_queries != n or neighbors.n_supports != n:
        raise ValueError("kp_convolution: neighbors must index these points")
    if features.shape != (n, params.d_in):
        raise ValueError(f"kp_convolution: features {features.shape} do not "
                         f"match (N={n}, d_in={params.d_in})")
    if neighbors.radius < params.disposition.radius * (1 - 1e-9):
        raise ValueError("kp_convolution: neighbor radius smaller than the "
                         "kernel disposition radius")

    i_ids = neighbors.query_of_pair()
    j_ids = neighbors.indices
    dp = points[j_ids] - points[i_ids]
    corr = kernel_correlation(dp, params.disposition)  # (P, N_k)

    df = ad.sub(ad.gather_rows(features, j_ids), ad.gather_rows(features, i_ids))
    n_k = params.disposition.n_points
    per_kernel = [ad.mul(df, ad.constant(corr[:, k:k + 1])) for k in range(n_k)]
    stacked = per_kernel[0] if n_k == 1 else ad.concat_lastdim(*per_kernel)
    flat_w = ad.reshape(params.weights, (n_k * params.d_in, params.d_out))
    pair_out = ad.matmul(stacked, flat_w)
    return ad.segment_sum(pair_out, neighbors.offsets)


def inception_fusion(points: np.ndarray, features: ad.Tensor,
                     neighbors: NeighborIndex, params_a: ConvUnitParams,
                     params_b: ConvUnitParams) -> ad.Tensor:
    """Sum of two convolution units at different kernel scales over one
    shared neighbor structure."""
    if params_a.d_in != params_b.d_in:
        raise ValueError("inception_fusion: units disagree on d_in")
    if params_a.d_out != params_b.d_out:
        raise ValueError("inception_fusion: units disagree on d_out")
    return ad.add(kp_convolution(points, features, neighbors, params_a),
                  kp_convolution(points, features, neighbors, params_b))


# --------------------------------------------------------------- attention

def _combine(q: ad.Tensor, k: ad.Tensor, op: str) -> ad.Tensor:
    if op == "hadamard":
        return ad.mul(q, k)
    if op == "add":
        return ad.add(q, k)
    return ad.sub(q, k)


def local_self_attention(points: np.ndarray, f_conv: ad.Tensor,
                         neighbors: NeighborIndex, params: AttentionParams,
                         return_weights: bool = False):
    """Vector self-attention over each point's neighborhood.

    Queries come from the point's own features, keys and values from its
    neighbors. Attention logits are kappa(combine(Q, K) + gamma(dp)) with a
    per-channel softmax over the neighborhood; the output aggregates
    V + gamma(dp). Each point's weights are non-negative and sum to one per
    channel. Empty neighborhoods yield zero rows.
    """
    if params.kappa is None or params.gamma is None:
        raise ValueError("local_self_attention: params must carry kappa and gamma")
    points = np.asarray(points, dtype=np.float64)
    n = neighbors.n_queries
    if f_conv.shape[0] != n or neighbors.n_supports != n:
        raise ValueError("local_self_attention: feature rows must match neighbors")
    d_out = params.w_v.shape[1]

    counts = neighbors.counts()
    total = len(neighbors.indices)
    if total == 0:
        warnings.warn("local_self_attention: all neighborhoods empty; "
                      "emitting zero rows")
        return_value = ad.constant(np.zeros((n, d_out)))
        if return_weights:
            return return_value, ad.constant(np.zeros((n, 0, d_out)))
        return return_value
    if np.any(counts == 0):
        warnings.warn(f"local_self_attention: {int((counts == 0).sum())} "
                      "empty neighborhoods emit zero rows")

    i_ids = neighbors.query_of_pair()
    j_ids = neighbors.indices
    dp = points[j_ids] - points[i_ids]

    q_all = ad.matmul(f_conv, params.w_q)
    k_all = ad.matmul(f_conv, params.w_k)
    v_all = ad.matmul(f_conv, params.w_v)
    q_pair = ad.gather_rows(q_all, i_ids)
    k_pair = ad.gather_rows(k_all, j_ids)
    v_pair = ad.gather_rows(v_all, j_ids)
    pos_enc = _mlp2(ad.constant(dp), params.gamma)            # (P, d_out)

    # the final kappa bias shifts every neighbor's logit equally per channel,
    # so the softmax cancels it; it is kept for a uniform MLP parameter shape
    pre = ad.add(_combine(q_pair, k_pair, params.combine_op), pos_enc)
    logits_pair = _mlp2(pre, params.kappa)                    # (P, d_out)
    values_pair = ad.add(v_pair, pos_enc)                     # (P, d_out)

    # dense (N, K_max, d) layout: slot s of row i holds that point's s-th
    # neighbor; padding slots point at pair 0 and are masked to exact zero
    # weight by a large negative additive constant before the softmax
    k_max = int(counts.max())
    slots = np.arange(total) - np.repeat(neighbors.offsets[:-1], counts)
    flat_positions = i_ids * k_max + slots
    flat_ids = np.zeros(n * k_max, dtype=np.int64)
    flat_ids[flat_positions] = np.arange(total)
    valid = np.zeros(n * k_max, dtype=bool)
    valid[flat_positions] = True

    dense_logits = ad.reshape(ad.gather_rows(logits_pair, flat_ids),
                              (n, k_max, d_out))
    mask = np.where(valid, 0.0, -1e9).reshape(n, k_max, 1)
    masked = ad.add(dense_logits, ad.constant(mask))
    att = ad.transpose_last2(ad.softmax_lastdim(ad.transpose_last2(masked)))
    row_mask = (counts > 0).astype(np.float64).reshape(n, 1, 1)
    att = ad.mul(att, ad.constant(row_mask))

    dense_values = ad.reshape(ad.gather_rows(values_pair, flat_ids),
                              (n, k_max, d_out))
    weighted = ad.mul(att, dense_values)
    out = ad.segment_sum(ad.reshape(weighted, (n * k_max, d_out)),
                         np.arange(0, n * k_max + 1, k_max))
    if return_weights:
        return out, att
    return out


def global_self_attention(features: ad.Tensor, params: AttentionParams) -> ad.Tensor:
    """Scaled dot-product attention across all points: every point attends
    to every other. Used only where the cloud is already heavily reduced."""
    q = ad.matmul(features, params.w_q)
    k = ad.matmul(features, params.w_k)
    v = ad.matmul(features, params.w_v)
    d_q = q.shape[1]
    logits = ad.scale(ad.matmul(q, ad.transpose_last2(k)), 1.0 / np.sqrt(d_q))
    return ad.matmul(ad.softmax_lastdim(logits), v)


# ------------------------------------------------------------------ blocks

@dataclass
class LayerSpec:
    """Widths and geometry for one encoder layer."""

    d_in: int
    d_out: int
    conv_radius: float
    cell: float
    kernel_a: tuple = (9, 0.75)
    kernel_b: tuple = (15, 1.0)
    encoder_version: str = "V1"

    def __post_init__(self):
        if self.conv_radius <= 0:
            raise ValueError("conv_radius must be positive")
        if self.d_out % 4 != 0:
            raise ValueError("d_out must be divisible by 4 (branch widths)")
        if self.encoder_version not in ("V1", "V2"):
            raise ValueError(f"encoder_version must be V1 or V2, "
                             f"got {self.encoder_version!r}")


@dataclass
class EncoderParams:
    """Trainable state of one encoder block. conv_b is None when the second
    convolution unit is ablated; attention is None when that branch is off;
    shortcut is None when input and output widths match (identity)."""

    conv_a: ConvUnitParams
    conv_b: ConvUnitParams | None
    attention: AttentionParams | None
    bn_enc: tuple       # (gamma, beta, BatchNormState)
    mlp_w: ad.Tensor
    bn_mlp: tuple
    shortcut: ad.Tensor | None


def encoder_block(points: np.ndarray, features: ad.Tensor,
                  neighbors: NeighborIndex, spec: LayerSpec,
                  params: EncoderParams, training: bool) -> ad.Tensor:
    """One encoder: convolution branch (+ attention branch), concat, channel
    max-pool, BN + activation, widening MLP, residual shortcut.

    The neighbor index is computed once by the caller and shared by both
    branches. Widths: both branches emit d_out/4, so the concat sits at
    d_out/2, the pooled encoding at d_out/4 and the MLP output at d_out.
    """
    f4 = spec.d_out // 4
    if params.conv_a.d_out != f4:
        raise ValueError(f"conv branch width {params.conv_a.d_out} != d_out/4 = {f4}")
    if features.shape[1] != spec.d_in:
        raise ValueError(f"encoder_block: features width {features.shape[1]} "
                         f"!= d_in {spec.d_in}")

    if params.conv_b is not None:
        f_conv = inception_fusion(points, features, neighbors,
                                  params.conv_a, params.conv_b)
    else:
        f_conv = kp_convolution(points, features, neighbors, params.conv_a)

    if params.attention is not None:
        if spec.encoder_version == "V2":
            f_att = global_self_attention(f_conv, params.attention)
        else:
            f_att = local_self_attention(points, f_conv, neighbors,
                                         params.attention)
        f_concat = ad.concat_lastdim(f_att, f_conv)   # (N, d_out/2)
    else:
        f_concat = f_conv                              # ablation: conv only

    gamma1, beta1, state1 = params.bn_enc
    f_enc = ad.leaky_relu(ad.batch_norm(ad.max_pool_channels(f_concat),
                                        gamma1, beta1, state1, training))
    gamma2, beta2, state2 = params.bn_mlp
    f_mlp = ad.leaky_relu(ad.batch_norm(ad.matmul(f_enc, params.mlp_w),
                                        gamma2, beta2, state2, training))
    shortcut = features if params.shortcut is None \
        else ad.matmul(features, params.shortcut)
    return ad.add(f_mlp, shortcut)


@dataclass
class DecoderParams:
    w: ad.Tensor
    bn: tuple           # (gamma, beta, BatchNormState)


def decoder_block(coarse_features: ad.Tensor, skip_features: ad.Tensor,
                  upsample_map: np.ndarray, params: DecoderParams,
                  training: bool) -> ad.Tensor:
    """Nearest-neighbor upsampling: gather each fine point's nearest coarse
    feature row, concat the skip features, then a shared Linear + BN +
    activation down to the decoder width."""
    upsample_map = np.asarray(upsample_map, dtype=np.int64)
    if len(upsample_map) != skip_features.shape[0]:
        raise ValueError(f"decoder_block: map length {len(upsample_map)} != "
                         f"skip rows {skip_features.shape[0]}")
    gathered = ad.gather_rows(coarse_features, upsample_map)
    cat = ad.concat_lastdim(gathered, skip_features)
    gamma, beta, state = params.bn
    return ad.leaky_relu(ad.batch_norm(ad.matmul(cat, params.w),
                                       gamma, beta, state, training))
