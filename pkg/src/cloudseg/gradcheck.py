"""Finite-difference verification suite over every op and layer.

Each check builds a small random instance, reduces the output to a scalar
through a fixed random linear functional, and compares the analytic
gradient against central differences. Elementary ops must agree to 1e-6,
composed blocks (layers, the loss) to 1e-4.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .geometry import generate_kernel_disposition, radius_neighbors
from .layers import (
    AttentionParams,
    ConvUnitParams,
    DecoderParams,
    EncoderParams,
    LayerSpec,
    decoder_block,
    encoder_block,
    global_self_attention,
    inception_fusion,
    kp_convolution,
    local_self_attention,
)
from .loss_metrics import pga_cross_entropy

OP_TOLERANCE = 1e-6
COMPOSED_TOLERANCE = 1e-4


def _functional(rng, shape) -> ad.Tensor:
    """Fixed random linear functional; drawn once so FD reruns see the
    same scalar function."""
    return ad.constant(rng.standard_normal(shape))


def _weighted(w: ad.Tensor, out: ad.Tensor) -> ad.Tensor:
    return ad.sum_all(ad.mul(out, w))


# ------------------------------------------------------------ elementary ops

def _check_elementwise(rng) -> float:
    a = ad.parameter(rng.standard_normal((4, 5)))
    b = ad.parameter(rng.standard_normal((4, 5)))
    row = ad.parameter(rng.standard_normal((1, 5)))
    w = _functional(rng, (4, 5))

    def f(a_t, b_t, row_t):
        out = ad.add(ad.mul(a_t, b_t), row_t)
        out = ad.sub(out, ad.scale(b_t, 0.3))
        return _weighted(w, ad.leaky_relu(ad.add(out, ad.constant(
            np.full((4, 5), 0.2)))))

    return ad.finite_diff_check(f, [a, b, row])


def _check_matmul(rng) -> float:
    a = ad.parameter(rng.standard_normal((5, 3)))
    b = ad.parameter(rng.standard_normal((3, 4)))
    w = _functional(rng, (5, 4))
    return ad.finite_diff_check(
        lambda x, y: _weighted(w, ad.matmul(x, y)), [a, b])


def _check_softmax(rng) -> float:
    x = ad.parameter(rng.standard_normal((6, 4)))
    w = _functional(rng, (6, 4))
    return ad.finite_diff_check(
        lambda t: _weighted(w, ad.softmax_lastdim(t)), [x], eps=1e-4)


def _check_gather_segment(rng) -> float:
    x = ad.parameter(rng.standard_normal((6, 3)))
    ids = rng.integers(0, 6, size=14)
    counts = np.array([3, 0, 5, 6])
    offsets = np.concatenate([[0], np.cumsum(counts)])
    w = _functional(rng, (4, 3))

    def f(t):
        return _weighted(w, ad.segment_sum(ad.gather_rows(t, ids), offsets))

    return ad.finite_diff_check(f, [x])


def _check_max_ops(rng) -> float:
    # keep entries separated so the max routing is stable under eps shifts
    base = rng.standard_normal((5, 8))
    base += 0.5 * np.argsort(np.argsort(base, axis=1), axis=1)
    x = ad.parameter(base)
    w = _functional(rng, (5, 4))

    def f(t):
        pooled = ad.max_pool_channels(t)
        return _weighted(w, pooled)

    return ad.finite_diff_check(f, [x])


def _check_reshape_ops(rng) -> float:
    x = ad.parameter(rng.standard_normal((4, 6)))
    w = _functional(rng, (4, 12))

    def f(t):
        r = ad.reshape(t, (2, 2, 6))
        tr = ad.transpose_last2(r)
        back = ad.reshape(tr, (4, 6))
        return _weighted(w, ad.concat_lastdim(back, ad.scale(t, 0.5)))

    return ad.finite_diff_check(f, [x])


def _check_batch_norm(rng) -> float:
    x = ad.parameter(rng.standard_normal((7, 3)))
    gamma = ad.parameter(rng.standard_normal((1, 3)) + 1.0)
    beta = ad.parameter(rng.standard_normal((1, 3)))
    w = _functional(rng, (7, 3))

    def f(x_t, g_t, b_t):
        out = ad.batch_norm(x_t, g_t, b_t, ad.BatchNormState(3), training=True)
        return _weighted(w, out)

    return ad.finite_diff_check(f, [x, gamma, beta])


# ------------------------------------------------------------------- layers

def _conv_setup(rng, d_in=2, d_out=3, n_k=5, n=10, radius=0.8, seed=0):
    points = rng.standard_normal((n, 3)) * 0.4
    neighbors = radius_neighbors(points, points, radius)
    disposition = generate_kernel_disposition(n_k, radius, seed=seed)
    weights = ad.parameter(
        rng.standard_normal((n_k, d_in, d_out)) / np.sqrt(n_k * d_in))
    features = ad.parameter(rng.standard_normal((n, d_in)))
    return points, neighbors, ConvUnitParams(disposition, weights), features


def _check_kp_convolution(rng) -> float:
    points, neighbors, params, features = _conv_setup(rng)
    w = _functional(rng, (len(points), params.weights.shape[2]))

    def f(feats, weights):
        p = ConvUnitParams(params.disposition, weights)
        return _weighted(w, kp_convolution(points, feats, neighbors, p))

    return ad.finite_diff_check(f, [features, params.weights])


def _check_inception(rng) -> float:
    points, neighbors, params_a, features = _conv_setup(rng, seed=1)
    _, _, params_b, _ = _conv_setup(rng, n_k=7, seed=2)

    w = _functional(rng, (len(points), params_a.weights.shape[2]))

    def f(feats, w_a, w_b):
        a = ConvUnitParams(params_a.disposition, w_a)
        b = ConvUnitParams(params_b.disposition, w_b)
        return _weighted(w, inception_fusion(points, feats, neighbors, a, b))

    return ad.finite_diff_check(f, [features, params_a.weights,
                                    params_b.weights])


def _attention_params(rng, d, combine_op="hadamard", local=True):
    def p(shape):
        return ad.parameter(rng.standard_normal(shape) * 0.5)
    if not local:
        return AttentionParams(w_q=p((d, d)), w_k=p((d, d)), w_v=p((d, d)))
    return AttentionParams(
        w_q=p((d, d)), w_k=p((d, d)), w_v=p((d, d)),
        kappa=(p((d, d)), p((1, d)), p((d, d)), p((1, d))),
        gamma=(p((3, d)), p((1, d)), p((d, d)), p((1, d))),
        combine_op=combine_op)


def _check_local_attention(rng, combine_op) -> float:
    n, d = 7, 3
    points = rng.standard_normal((n, 3)) * 0.4
    neighbors = radius_neighbors(points, points, 0.8)
    params = _attention_params(rng, d, combine_op)
    features = ad.parameter(rng.standard_normal((n, d)))
    leaves = [features, params.w_q, params.w_k, params.w_v,
              *params.kappa, *params.gamma]
    w = _functional(rng, (n, d))

    def f(feats, w_q, w_k, w_v, kw1, kb1, kw2, kb2, gw1, gb1, gw2, gb2):
        p = AttentionParams(w_q=w_q, w_k=w_k, w_v=w_v,
                            kappa=(kw1, kb1, kw2, kb2),
                            gamma=(gw1, gb1, gw2, gb2), combine_op=combine_op)
        return _weighted(w, local_self_attention(points, feats, neighbors, p))

    return ad.finite_diff_check(f, leaves)


def _check_global_attention(rng) -> float:
    params = _attention_params(rng, 3, local=False)
    features = ad.parameter(rng.standard_normal((6, 3)))
    w = _functional(rng, (6, 3))

    def f(feats, w_q, w_k, w_v):
        p = AttentionParams(w_q=w_q, w_k=w_k, w_v=w_v)
        return _weighted(w, global_self_attention(feats, p))

    return ad.finite_diff_check(f, [features, params.w_q, params.w_k,
                                    params.w_v])


def _encoder_setup(rng, version, d_in=2, d_out=8, n=12, radius=0.8):
    points = rng.standard_normal((n, 3)) * 0.4
    neighbors = radius_neighbors(points, points, radius)
    f4 = d_out // 4
    conv_a = ConvUnitParams(
        generate_kernel_disposition(5, 0.75 * radius, seed=1),
        ad.parameter(rng.standard_normal((5, d_in, f4)) / np.sqrt(5 * d_in)))
    conv_b = ConvUnitParams(
        generate_kernel_disposition(7, radius, seed=2),
        ad.parameter(rng.standard_normal((7, d_in, f4)) / np.sqrt(7 * d_in)))
    attention = _attention_params(rng, f4, local=(version == "V1"))
    bn_enc = (ad.parameter(np.ones((1, f4))), ad.parameter(np.zeros((1, f4))),
              ad.BatchNormState(f4))
    mlp_w = ad.parameter(rng.standard_normal((f4, d_out)) / np.sqrt(f4))
    bn_mlp = (ad.parameter(np.ones((1, d_out))),
              ad.parameter(np.zeros((1, d_out))), ad.BatchNormState(d_out))
    shortcut = ad.parameter(rng.standard_normal((d_in, d_out)) / np.sqrt(d_in))
    params = EncoderParams(conv_a=conv_a, conv_b=conv_b, attention=attention,
                           bn_enc=bn_enc, mlp_w=mlp_w, bn_mlp=bn_mlp,
                           shortcut=shortcut)
    spec = LayerSpec(d_in=d_in, d_out=d_out, conv_radius=radius,
                     cell=radius / 2.5, kernel_a=(5, 0.75), kernel_b=(7, 1.0),
                     encoder_version=version)
    features = ad.parameter(rng.standard_normal((n, d_in)))
    return points, neighbors, spec, params, features


def _encoder_leaves(params, features):
    leaves = [features, params.conv_a.weights, params.conv_b.weights,
              params.mlp_w, params.shortcut,
              params.bn_enc[0], params.bn_enc[1],
              params.bn_mlp[0], params.bn_mlp[1],
              params.attention.w_q, params.attention.w_k,
              params.attention.w_v]
    if params.attention.kappa is not None:
        leaves += list(params.attention.kappa) + list(params.attention.gamma)
    return leaves


def _check_encoder(rng, version) -> float:
    points, neighbors, spec, params, features = _encoder_setup(rng, version)
    w = _functional(rng, (len(points), spec.d_out))

    def f(*_):
        out = encoder_block(points, features, neighbors, spec, params,
                            training=True)
        return _weighted(w, out)

    return ad.finite_diff_check(f, _encoder_leaves(params, features))


def _check_decoder(rng) -> float:
    coarse = ad.parameter(rng.standard_normal((4, 3)))
    skip = ad.parameter(rng.standard_normal((9, 2)))
    w = ad.parameter(rng.standard_normal((5, 4)) / np.sqrt(5))
    gamma = ad.parameter(np.ones((1, 4)))
    beta = ad.parameter(np.zeros((1, 4)))
    upmap = rng.integers(0, 4, size=9)
    fw = _functional(rng, (9, 4))

    def f(c, s, w_t, g_t, b_t):
        params = DecoderParams(w=w_t, bn=(g_t, b_t, ad.BatchNormState(4)))
        return _weighted(fw, decoder_block(c, s, upmap, params, training=True))

    return ad.finite_diff_check(f, [coarse, skip, w, gamma, beta])


def _check_pga_loss(rng) -> float:
    n, c = 9, 4
    logits = ad.parameter(rng.standard_normal((n, c)))
    labels = rng.integers(0, c, size=n)
    labels[rng.integers(0, n)] = -1
    weights = rng.uniform(0.5, 2.0, size=n)

    def f(t):
        return pga_cross_entropy(t, labels, weights)

    return ad.finite_diff_check(f, [logits])


CHECKS = {
    "op:elementwise": (_check_elementwise, OP_TOLERANCE),
    "op:matmul": (_check_matmul, OP_TOLERANCE),
    "op:softmax": (_check_softmax, OP_TOLERANCE),
    "op:gather_segment": (_check_gather_segment, OP_TOLERANCE),
    "op:max_pool": (_check_max_ops, OP_TOLERANCE),
    "op:reshape_concat": (_check_reshape_ops, OP_TOLERANCE),
    "op:batch_norm": (_check_batch_norm, OP_TOLERANCE),
    "layer:kp_convolution": (_check_kp_convolution, COMPOSED_TOLERANCE),
    "layer:inception_fusion": (_check_inception, COMPOSED_TOLERANCE),
    "layer:local_attention_hadamard":
        (lambda rng: _check_local_attention(rng, "hadamard"),
         COMPOSED_TOLERANCE),
    "layer:local_attention_add":
        (lambda rng: _check_local_attention(rng, "add"), COMPOSED_TOLERANCE),
    "layer:local_attention_subtract":
        (lambda rng: _check_local_attention(rng, "subtract"),
         COMPOSED_TOLERANCE),
    "layer:global_attention": (_check_global_attention, COMPOSED_TOLERANCE),
    "layer:encoder_v1": (lambda rng: _check_encoder(rng, "V1"),
                         COMPOSED_TOLERANCE),
    "layer:encoder_v2": (lambda rng: _check_encoder(rng, "V2"),
                         COMPOSED_TOLERANCE),
    "layer:decoder": (_check_decoder, COMPOSED_TOLERANCE),
    "layer:pga_cross_entropy": (_check_pga_loss, COMPOSED_TOLERANCE),
}


def run_suite(n_seeds: int = 10, base_seed: int = 100) -> dict[str, dict]:
    """Run every check across seeds; returns per-check worst error and gate."""
    results = {}
    for name, (check, tolerance) in CHECKS.items():
        worst = 0.0
        for s in range(n_seeds):
            rng = np.random.default_rng(base_seed + s)
            worst = max(worst, check(rng))
        results[name] = {"max_error": worst, "tolerance": tolerance,
                         "passed": worst <= tolerance}
    return results


def format_suite_report(results: dict[str, dict]) -> str:
    width = max(len(name) for name in results)
    lines = []
    for name, r in results.items():
        status = "ok" if r["passed"] else "FAIL"
        lines.append(f"{name:<{width}}  {r['max_error']:.3e}  "
                     f"(tol {r['tolerance']:.0e})  {status}")
    return "\n".join(lines) + "\n"
