"""Whole-network tests: pyramid construction, forward contract, invariances,
determinism, and checkpoint round trips."""

import numpy as np
import pytest

import cloudseg.autodiff as ad
from cloudseg.config import ConfigError, NetworkConfig, OptimizerConfig
from cloudseg.geometry import PointCloud, voxel_grid_subsample
from cloudseg.network import Model, Pyramid, build_pyramid


def tiny_config(**kw):
    base = dict(n_classes=3, n_features=2, n_layers=2, base_width=8,
                cell_0=0.1, sphere_radius=1.0, min_crop_points=8,
                optimizer=OptimizerConfig(steps=5))
    base.update(kw)
    return NetworkConfig(**base)


def random_cloud(rng, n=120, scale=1.0):
    positions = rng.uniform(-scale, scale, size=(n, 3))
    features = rng.standard_normal((n, 2))
    labels = rng.integers(0, 3, size=n)
    return PointCloud(positions, features, labels)


# ------------------------------------------------------------------ pyramid

def test_pyramid_structure():
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 200)
    config = tiny_config(n_layers=3)
    pyramid = build_pyramid(cloud, config)

    assert pyramid.n_levels == 3
    sizes = [len(p) for p in pyramid.positions]
    assert sizes[0] >= sizes[1] >= sizes[2] >= 1
    assert pyramid.base_features.shape == (sizes[0], 2)
    assert pyramid.cell_of_raw.shape == (200,)
    assert pyramid.cell_of_raw.min() >= 0
    assert pyramid.cell_of_raw.max() < sizes[0]

    # pools partition each level, upmaps stay in range, neighborhoods
    # always include the point itself
    for level in range(2):
        pool = pyramid.pools[level]
        assert pool.n_queries == sizes[level + 1]
        np.testing.assert_array_equal(np.sort(pool.indices),
                                      np.arange(sizes[level]))
        assert np.all(pool.counts() >= 1)
        upmap = pyramid.upmaps[level]
        assert upmap.shape == (sizes[level],)
        assert upmap.min() >= 0 and upmap.max() < sizes[level + 1]
    for level in range(3):
        assert np.all(pyramid.neighbors[level].counts() >= 1)


def test_pyramid_cell_membership_matches_subsample():
    rng = np.random.default_rng(1)
    cloud = random_cloud(rng, 150)
    config = tiny_config()
    pyramid = build_pyramid(cloud, config)
    level0, pool = voxel_grid_subsample(cloud, config.layer_cell(0))
    for cell in range(pool.n_queries):
        members = pool.indices[pool.offsets[cell]:pool.offsets[cell + 1]]
        assert np.all(pyramid.cell_of_raw[members] == cell)


def test_pyramid_constant_feature_column():
    rng = np.random.default_rng(2)
    cloud = random_cloud(rng, 80)
    pyramid = build_pyramid(cloud, tiny_config(constant_feature=True))
    assert pyramid.base_features.shape[1] == 3
    np.testing.assert_array_equal(pyramid.base_features[:, 0], 1.0)


def test_pyramid_rejects_empty_cloud():
    with pytest.raises(ValueError, match="empty"):
        build_pyramid(PointCloud(np.zeros((0, 3)), np.zeros((0, 2))),
                      tiny_config())


# ------------------------------------------------------------------ forward

def test_logits_shape_across_configs():
    rng = np.random.default_rng(3)
    for kw in (dict(),
               dict(n_layers=1),
               dict(n_layers=3, base_width=4),
               dict(use_second_conv=False),
               dict(use_attention=False, use_global_final=False),
               dict(use_global_final=False),
               dict(combine_op="add"),
               dict(combine_op="subtract"),
               dict(constant_feature=True),
               dict(n_classes=7)):
        config = tiny_config(**kw)
        cloud = random_cloud(rng, 90)
        model = Model(config)
        logits = model.forward(build_pyramid(cloud, config), training=True)
        assert logits.shape == (90, config.n_classes)
        assert np.all(np.isfinite(logits.values))


def test_softmax_rows_normalized():
    rng = np.random.default_rng(4)
    config = tiny_config()
    cloud = random_cloud(rng, 100)
    model = Model(config)
    logits = model.forward(build_pyramid(cloud, config))
    probs = ad.softmax_lastdim(logits).values
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(probs >= 0)


def test_translation_invariance():
    rng = np.random.default_rng(5)
    config = tiny_config(n_layers=3, base_width=8)
    cloud = random_cloud(rng, 150)
    model = Model(config)
    pyramid = build_pyramid(cloud, config)
    base = model.forward(pyramid).values
    for offset in ([10.0, -5.0, 3.0], [0.37, 0.0, -12.25]):
        shifted = model.forward(pyramid.translated(offset)).values
        np.testing.assert_allclose(shifted, base, atol=1e-6)


def test_forward_deterministic_per_seed():
    rng = np.random.default_rng(6)
    config = tiny_config(seed=11)
    cloud = random_cloud(rng, 100)
    pyramid = build_pyramid(cloud, config)
    a = Model(config).forward(pyramid).values
    b = Model(config).forward(pyramid).values
    np.testing.assert_array_equal(a, b)
    c = Model(tiny_config(seed=12)).forward(pyramid).values
    assert not np.array_equal(a, c)


def test_forward_rejects_mismatched_pyramid():
    rng = np.random.default_rng(7)
    cloud = random_cloud(rng, 60)
    pyramid = build_pyramid(cloud, tiny_config(n_layers=2))
    model = Model(tiny_config(n_layers=1))
    with pytest.raises(ValueError, match="levels"):
        model.forward(pyramid)


def test_training_updates_bn_running_stats_inference_does_not():
    rng = np.random.default_rng(8)
    config = tiny_config()
    cloud = random_cloud(rng, 80)
    pyramid = build_pyramid(cloud, config)
    model = Model(config)
    state = next(iter(model._bn_states.values()))
    before = state.running_mean.copy()
    model.forward(pyramid, training=False)
    np.testing.assert_array_equal(state.running_mean, before)
    model.forward(pyramid, training=True)
    assert not np.array_equal(state.running_mean, before)


# ----------------------------------------------------------- width contract

def test_width_contract_at_construction():
    config = tiny_config(n_layers=3, base_width=16, n_features=2)
    model = Model(config)
    for layer in range(3):
        d_out = config.layer_width(layer)
        d_in = config.input_width() if layer == 0 \
            else config.layer_width(layer - 1)
        enc = model.encoders[layer]
        # branch width d_out/4, pooled d_out/4, MLP back up to d_out
        assert enc.conv_a.weights.shape == (9, d_in, d_out // 4)
        assert enc.conv_b.weights.shape == (15, d_in, d_out // 4)
        assert enc.attention.w_v.shape == (d_out // 4, d_out // 4)
        assert enc.mlp_w.shape == (d_out // 4, d_out)
    assert model.encoders[-1].attention.kappa is None     # global final
    assert model.encoders[0].attention.kappa is not None  # local elsewhere


def test_attention_off_needs_width_divisible_by_8():
    with pytest.raises(ConfigError, match="divisible by 8"):
        Model(tiny_config(base_width=4, use_attention=False,
                          use_global_final=False))
    model = Model(tiny_config(base_width=8, use_attention=False,
                              use_global_final=False))
    enc = model.encoders[0]
    assert enc.attention is None
    assert enc.mlp_w.shape == (1, 8)  # conv branch 2 wide, pooled to 1


# -------------------------------------------------------------- end-to-end

def test_end_to_end_gradient():
    rng = np.random.default_rng(9)
    config = tiny_config(seed=3)
    cloud = random_cloud(rng, 30, scale=0.4)
    pyramid = build_pyramid(cloud, config)
    model = Model(config)
    weight = ad.constant(rng.standard_normal((30, config.n_classes)))

    leaves = [model.encoders[0].conv_a.weights,
              model.encoders[0].attention.w_q,
              model.encoders[0].attention.gamma[0],
              model.encoders[1].mlp_w,
              model.decoders[0].w,
              model.head_w,
              model.head_b]

    def f(*_):
        logits = model.forward(pyramid, training=True)
        return ad.sum_all(ad.mul(logits, weight))

    err = ad.finite_diff_check(f, leaves)
    assert err < 1e-3


# -------------------------------------------------------------- checkpoints

def test_state_dict_round_trip_bitwise():
    rng = np.random.default_rng(10)
    config = tiny_config(seed=21)
    cloud = random_cloud(rng, 90)
    pyramid = build_pyramid(cloud, config)
    model = Model(config)
    model.forward(pyramid, training=True)   # move BN running stats
    base = model.forward(pyramid).values

    other = Model(tiny_config(seed=99))
    other.load_state_dict(model.state_dict())
    np.testing.assert_array_equal(other.forward(pyramid).values, base)


def test_checkpoint_file_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    config = tiny_config(seed=5)
    cloud = random_cloud(rng, 90)
    pyramid = build_pyramid(cloud, config)
    model = Model(config)
    model.forward(pyramid, training=True)
    path = str(tmp_path / "model.ckpt")
    ad.save_checkpoint(path, model.state_dict())

    other = Model(config)
    other.load_state_dict(ad.load_checkpoint(path))
    np.testing.assert_allclose(other.forward(pyramid).values,
                               model.forward(pyramid).values,
                               rtol=1e-4, atol=1e-5)

    # a second trip through float32 is exact: the values are already
    # representable
    path2 = str(tmp_path / "model2.ckpt")
    ad.save_checkpoint(path2, other.state_dict())
    reloaded = ad.load_checkpoint(path2)
    for name, arr in other.state_dict().items():
        np.testing.assert_array_equal(reloaded[name], arr)


def test_load_state_dict_rejects_bad_keys():
    model = Model(tiny_config())
    state = model.state_dict()
    state.pop("head/bias")
    with pytest.raises(ValueError, match="missing"):
        model.load_state_dict(state)
    state = model.state_dict()
    state["bogus"] = np.zeros(3)
    with pytest.raises(ValueError, match="unexpected"):
        model.load_state_dict(state)
    state = model.state_dict()
    state["head/bias"] = np.zeros((2, 2))
    with pytest.raises(ValueError, match="shape"):
        model.load_state_dict(state)
