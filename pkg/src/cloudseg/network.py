"""Full segmentation network: multi-resolution pyramid, stacked encoders,
mirrored decoders with skip connections, and the classification head.

The pyramid (positions, neighbor indices, pooling and upsampling maps) is
built once per crop from plain geometry; the forward pass consumes it and
runs entirely inside the autodiff graph. Keeping the two apart makes the
translation-invariance property directly testable: shift every stored
position and the logits must not change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import ConfigError, NetworkConfig
from .geometry import (
    NeighborIndex,
    PointCloud,
    generate_kernel_disposition,
    nearest_upsample_map,
    radius_neighbors,
    voxel_grid_subsample,
)
from .layers import (
    AttentionParams,
    ConvUnitParams,
    DecoderParams,
    EncoderParams,
    LayerSpec,
    decoder_block,
    encoder_block,
)


@dataclass
class Pyramid:
    """Per-crop geometry: one entry per resolution level.

    cell_of_raw maps every raw crop point to its level-0 cell, pools[l]
    groups level-l points into level-l+1 cells, upmaps[l] gives each
    level-l point its nearest level-l+1 point.
    """

    raw_positions: np.ndarray
    base_features: np.ndarray          # (N_0, F) pooled input features
    cell_of_raw: np.ndarray            # (N_raw,) -> [0, N_0)
    positions: list                    # per level: (N_l, 3)
    neighbors: list                    # per level: NeighborIndex
    pools: list                        # level l -> l+1 grouping, len L-1
    upmaps: list                       # per level l: (N_l,) -> [0, N_{l+1})

    @property
    def n_levels(self) -> int:
        return len(self.positions)

    def translated(self, offset) -> "Pyramid":
        """Same index structure, every coordinate shifted by a constant."""
        offset = np.asarray(offset, dtype=np.float64).reshape(1, 3)
        return Pyramid(
            raw_positions=self.raw_positions + offset,
            base_features=self.base_features,
            cell_of_raw=self.cell_of_raw,
            positions=[p + offset for p in self.positions],
            neighbors=self.neighbors,
            pools=self.pools,
            upmaps=self.upmaps,
        )


def build_pyramid(cloud: PointCloud, config: NetworkConfig) -> Pyramid:
    """Subsample the crop once per layer (cell doubling), compute each
    level's radius neighborhoods, and record the pooling/upsampling maps."""
    if len(cloud) == 0:
        raise ValueError("build_pyramid: empty cloud")
    level0, pool_raw = voxel_grid_subsample(cloud, config.layer_cell(0))
    cell_of_raw = np.empty(len(cloud), dtype=np.int64)
    cell_of_raw[pool_raw.indices] = pool_raw.query_of_pair()

    features = level0.features
    if config.constant_feature:
        features = np.concatenate([np.ones((len(level0), 1)), features], axis=1)
    if features.shape[1] != config.input_width():
        raise ValueError(f"build_pyramid: expected {config.input_width()} "
                         f"input features, got {features.shape[1]}")

    positions = [level0.positions]
    pools: list[NeighborIndex] = []
    upmaps: list[np.ndarray] = []
    for layer in range(config.n_layers - 1):
        parent = PointCloud(positions[layer],
                            np.zeros((len(positions[layer]), 1)))
        child, pool = voxel_grid_subsample(parent, config.layer_cell(layer + 1))
        positions.append(child.positions)
        pools.append(pool)
        upmaps.append(nearest_upsample_map(positions[layer], child.positions))

    neighbors = [radius_neighbors(positions[layer], positions[layer],
                                  config.layer_radius(layer),
                                  cap=config.neighbor_cap)
                 for layer in range(config.n_layers)]
    return Pyramid(raw_positions=cloud.positions, base_features=features,
                   cell_of_raw=cell_of_raw, positions=positions,
                   neighbors=neighbors, pools=pools, upmaps=upmaps)


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Model:
    """Parameter container plus the forward pass.

    Parameters are float64 leaf tensors registered under stable names, so
    checkpoints are order-independent. Kernel dispositions are regenerated
    from fixed seeds (layer and unit index), never stored.
    """

    def __init__(self, config: NetworkConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self._params: dict[str, ad.Tensor] = {}
        self._bn_states: dict[str, ad.BatchNormState] = {}

        if not config.use_attention and (config.base_width // 4) % 2 != 0:
            raise ConfigError("attention-off ablation needs base_width "
                              "divisible by 8 (channel pooling halves the "
                              "conv branch alone)")

        self.specs: list[LayerSpec] = []
        self.encoders: list[EncoderParams] = []
        for layer in range(config.n_layers):
            d_in = config.input_width() if layer == 0 \
                else config.layer_width(layer - 1)
            d_out = config.layer_width(layer)
            is_final = layer == config.n_layers - 1
            version = "V2" if (is_final and config.use_global_final) else "V1"
            spec = LayerSpec(d_in=d_in, d_out=d_out,
                             conv_radius=config.layer_radius(layer),
                             cell=config.layer_cell(layer),
                             kernel_a=config.kernel_a,
                             kernel_b=config.kernel_b,
                             encoder_version=version)
            self.specs.append(spec)
            self.encoders.append(self._build_encoder(rng, layer, spec))

        # decoders run from the coarsest level down; decoder l emits the
        # width of encoder l so the skip pathway mirrors the encoder stack
        self.decoders: list[DecoderParams | None] = [None] * config.n_layers
        for layer in range(config.n_layers - 2, -1, -1):
            coarse_width = config.layer_width(layer + 1)
            skip_width = config.layer_width(layer)
            out_width = config.layer_width(layer)
            w = self._param(f"decoder{layer}/linear",
                            _he_uniform(rng, (coarse_width + skip_width, out_width),
                                        coarse_width + skip_width))
            bn = self._bn(f"decoder{layer}/bn", out_width)
            self.decoders[layer] = DecoderParams(w=w, bn=bn)

        head_in = config.layer_width(0)
        self.head_w = self._param("head/linear",
                                  _he_uniform(rng, (head_in, config.n_classes),
                                              head_in))
        self.head_b = self._param("head/bias", np.zeros((1, config.n_classes)))

    # ------------------------------------------------------------ building

    def _param(self, name: str, values: np.ndarray) -> ad.Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name}")
        tensor = ad.parameter(values, name=name)
        self._params[name] = tensor
        return tensor

    def _bn(self, name: str, dim: int) -> tuple:
        gamma = self._param(f"{name}/gamma", np.ones((1, dim)))
        beta = self._param(f"{name}/beta", np.zeros((1, dim)))
        state = ad.BatchNormState(dim)
        self._bn_states[name] = state
        return (gamma, beta, state)

    def _conv_unit(self, rng, layer: int, unit: int, d_in: int, d_out: int,
                   kernel: tuple, conv_radius: float) -> ConvUnitParams:
        n_k, frac = int(kernel[0]), float(kernel[1])
        # disposition seeds depend only on layer and unit, so a checkpoint
        # trained under one config seed reloads identically under another
        disposition = generate_kernel_disposition(
            n_k, frac * conv_radius, seed=layer * 2 + unit,
            sigma_ratio=self.config.kernel_sigma_ratio)
        weights = self._param(
            f"encoder{layer}/conv{unit}/weights",
            _he_uniform(rng, (n_k, d_in, d_out), n_k * d_in))
        return ConvUnitParams(disposition=disposition, weights=weights)

    def _attention(self, rng, layer: int, spec: LayerSpec) -> AttentionParams:
        f4 = spec.d_out // 4
        prefix = f"encoder{layer}/attention"
        w_q = self._param(f"{prefix}/w_q", _he_uniform(rng, (f4, f4), f4))
        w_k = self._param(f"{prefix}/w_k", _he_uniform(rng, (f4, f4), f4))
        w_v = self._param(f"{prefix}/w_v", _he_uniform(rng, (f4, f4), f4))
        if spec.encoder_version == "V2":
            return AttentionParams(w_q=w_q, w_k=w_k, w_v=w_v,
                                   combine_op=self.config.combine_op)
        kappa = (
            self._param(f"{prefix}/kappa_w1", _he_uniform(rng, (f4, f4), f4)),
            self._param(f"{prefix}/kappa_b1", np.zeros((1, f4))),
            self._param(f"{prefix}/kappa_w2", _he_uniform(rng, (f4, f4), f4)),
            self._param(f"{prefix}/kappa_b2", np.zeros((1, f4))),
        )
        gamma = (
            self._param(f"{prefix}/gamma_w1", _he_uniform(rng, (3, f4), 3)),
            self._param(f"{prefix}/gamma_b1", np.zeros((1, f4))),
            self._param(f"{prefix}/gamma_w2", _he_uniform(rng, (f4, f4), f4)),
            self._param(f"{prefix}/gamma_b2", np.zeros((1, f4))),
        )
        return AttentionParams(w_q=w_q, w_k=w_k, w_v=w_v, kappa=kappa,
                               gamma=gamma, combine_op=self.config.combine_op)

    def _build_encoder(self, rng, layer: int, spec: LayerSpec) -> EncoderParams:
        config = self.config
        f4 = spec.d_out // 4
        # width bookkeeping: branches at d_out/4, concat d_out/2, pooled
        # encoding d_out/4, MLP widens to d_out
        assert 4 * f4 == spec.d_out
        conv_a = self._conv_unit(rng, layer, 0, spec.d_in, f4,
                                 config.kernel_a, spec.conv_radius)
        conv_b = None
        if config.use_second_conv:
            conv_b = self._conv_unit(rng, layer, 1, spec.d_in, f4,
                                     config.kernel_b, spec.conv_radius)
        attention = self._attention(rng, layer, spec) if config.use_attention \
            else None
        concat_width = 2 * f4 if attention is not None else f4
        pooled_width = concat_width // 2
        assert concat_width % 2 == 0
        bn_enc = self._bn(f"encoder{layer}/bn_enc", pooled_width)
        mlp_w = self._param(f"encoder{layer}/mlp",
                            _he_uniform(rng, (pooled_width, spec.d_out),
                                        pooled_width))
        bn_mlp = self._bn(f"encoder{layer}/bn_mlp", spec.d_out)
        shortcut = None
        if spec.d_in != spec.d_out:
            shortcut = self._param(f"encoder{layer}/shortcut",
                                   _he_uniform(rng, (spec.d_in, spec.d_out),
                                               spec.d_in))
        return EncoderParams(conv_a=conv_a, conv_b=conv_b, attention=attention,
                             bn_enc=bn_enc, mlp_w=mlp_w, bn_mlp=bn_mlp,
                             shortcut=shortcut)

    # ------------------------------------------------------------- forward

    def forward(self, pyramid: Pyramid, training: bool = False) -> ad.Tensor:
        """Logits for every raw crop point, (N_raw, n_classes)."""
        config = self.config
        if pyramid.n_levels != config.n_layers:
            raise ValueError(f"pyramid has {pyramid.n_levels} levels, config "
                             f"wants {config.n_layers}")
        f = ad.constant(pyramid.base_features)
        skips: list[ad.Tensor] = []
        for layer in range(config.n_layers):
            f = encoder_block(pyramid.positions[layer], f,
                              pyramid.neighbors[layer], self.specs[layer],
                              self.encoders[layer], training)
            skips.append(f)
            if layer < config.n_layers - 1:
                pool = pyramid.pools[layer]
                gathered = ad.gather_rows(f, pool.indices)
                sums = ad.segment_sum(gathered, pool.offsets)
                inv = (1.0 / pool.counts()).reshape(-1, 1)
                f = ad.mul(sums, ad.constant(inv))

        f = skips[-1]
        for layer in range(config.n_layers - 2, -1, -1):
            f = decoder_block(f, skips[layer], pyramid.upmaps[layer],
                              self.decoders[layer], training)

        logits0 = ad.add(ad.matmul(f, self.head_w), self.head_b)
        return ad.gather_rows(logits0, pyramid.cell_of_raw)

    # ---------------------------------------------------------- parameters

    def parameters(self) -> list[ad.Tensor]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, ad.Tensor]:
        return dict(self._params)

    def zero_grads(self):
        for t in self._params.values():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.values.copy() for name, t in self._params.items()}
        for name, state in self._bn_states.items():
            out[f"{name}/running_mean"] = state.running_mean.copy()
            out[f"{name}/running_var"] = state.running_var.copy()
        return out

    def load_state_dict(self, values: dict[str, np.ndarray]):
        expected = set(self._params)
        for name in self._bn_states:
            expected.add(f"{name}/running_mean")
            expected.add(f"{name}/running_var")
        missing = expected - set(values)
        extra = set(values) - expected
        if missing or extra:
            raise ValueError(f"state dict mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for name, tensor in self._params.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != tensor.values.shape:
                raise ValueError(f"{name}: shape {arr.shape} != "
                                 f"{tensor.values.shape}")
            tensor.values = arr.copy()
        for name, state in self._bn_states.items():
            state.running_mean = np.asarray(
                values[f"{name}/running_mean"], dtype=np.float64).reshape(
                state.running_mean.shape).copy()
            state.running_var = np.asarray(
                values[f"{name}/running_var"], dtype=np.float64).reshape(
                state.running_var.shape).copy()
