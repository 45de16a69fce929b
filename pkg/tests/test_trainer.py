"""Trainer, optimizer, voting inference, and ablation grid tests."""

import os

import numpy as np
import pytest

import cloudseg.autodiff as ad
from cloudseg.config import ConfigError, NetworkConfig, OptimizerConfig, PGAConfig
from cloudseg.data_io import SceneSpec
from cloudseg.geometry import PointCloud
from cloudseg.network import Model, build_pyramid
from cloudseg.trainer import (
    CloudSource,
    Optimizer,
    TrainLog,
    ablation_rows,
    evaluate,
    evaluate_clouds,
    format_ablation_table,
    sample_training_crop,
    sphere_crop,
    tile_centers,
    train,
    vote_probabilities,
)


def small_config(**kw):
    base = dict(n_classes=2, n_features=2, n_layers=2, base_width=8,
                cell_0=0.08, sphere_radius=1.0, min_crop_points=16,
                optimizer=OptimizerConfig(steps=3, checkpoint_every=0),
                pga=PGAConfig(k=8), seed=0)
    base.update(kw)
    return NetworkConfig(**base)


def small_scene(seed=0):
    return SceneSpec(densities={"plane": 300.0, "poles": 300.0}, seed=seed)


def random_cloud(rng, n=80, extent=0.3, n_classes=2):
    positions = rng.uniform(0, extent, size=(n, 3))
    return PointCloud(positions, rng.standard_normal((n, 2)),
                      rng.integers(0, n_classes, size=n))


# -------------------------------------------------------------------- crops

def test_sphere_crop_matches_bruteforce():
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 200, extent=2.0)
    center = np.array([1.0, 1.0, 0.5])
    crop = sphere_crop(cloud, center, 0.6)
    mask = np.linalg.norm(cloud.positions - center, axis=1) <= 0.6
    np.testing.assert_array_equal(crop.positions, cloud.positions[mask])
    np.testing.assert_array_equal(crop.features, cloud.features[mask])
    np.testing.assert_array_equal(crop.labels, cloud.labels[mask])


def test_sample_training_crop_centers_on_labeled_point():
    rng = np.random.default_rng(1)
    cloud = random_cloud(rng, 150, extent=0.5)
    cloud.labels[:100] = -1
    config = small_config(min_crop_points=8, sphere_radius=0.3)
    for _ in range(10):
        crop, center = sample_training_crop(cloud, config, rng)
        assert len(crop) >= 8
        assert np.any(crop.labels != -1)
        owner = np.flatnonzero((cloud.positions == center).all(axis=1))[0]
        assert cloud.labels[owner] != -1


def test_sample_training_crop_error_paths():
    rng = np.random.default_rng(2)
    cloud = random_cloud(rng, 50)
    cloud.labels[:] = -1
    with pytest.raises(ValueError, match="no labeled"):
        sample_training_crop(cloud, small_config(), rng)
    cloud2 = random_cloud(rng, 50)
    with pytest.raises(RuntimeError, match="no usable crop"):
        sample_training_crop(cloud2, small_config(min_crop_points=500), rng)


# ---------------------------------------------------------------- optimizer

def test_sgd_momentum_hand_values():
    w = ad.parameter(np.zeros((1, 1)), name="w")
    opt = Optimizer(OptimizerConfig(kind="sgd", lr=0.1, momentum=0.9,
                                    steps=100), {"w": w})
    w.accumulate(np.ones((1, 1)))
    opt.step(0)
    assert w.values[0, 0] == pytest.approx(-0.1)
    w.zero_grad()
    w.accumulate(np.ones((1, 1)))
    opt.step(1)
    # velocity: -0.9*0.1 - 0.1 = -0.19, weight: -0.1 - 0.19 = -0.29
    assert w.values[0, 0] == pytest.approx(-0.29)


def test_adam_first_step_is_signed_lr():
    w = ad.parameter(np.zeros((1, 2)), name="w")
    opt = Optimizer(OptimizerConfig(kind="adam", lr=0.01, steps=10), {"w": w})
    w.accumulate(np.array([[3.0, -0.5]]))
    opt.step(0)
    np.testing.assert_allclose(w.values, [[-0.01, 0.01]], rtol=1e-6)


def test_optimizer_lr_schedule():
    opt = Optimizer(OptimizerConfig(lr=0.5, steps=10, decay_at=0.7,
                                    decay_factor=0.1), {})
    assert opt.lr_at(0) == pytest.approx(0.5)
    assert opt.lr_at(6) == pytest.approx(0.5)
    assert opt.lr_at(7) == pytest.approx(0.05)
    assert opt.lr_at(9) == pytest.approx(0.05)


def test_optimizer_rejects_unknown_kind():
    with pytest.raises(ConfigError, match="optimizer"):
        OptimizerConfig(kind="lbfgs").validate()


# ----------------------------------------------------------------- training

def test_zero_steps_checkpoint_equals_initialization(tmp_path):
    config = small_config(optimizer=OptimizerConfig(steps=0))
    model, log = train(config, small_scene(), out_dir=str(tmp_path))
    assert len(log.rows) == 0
    loaded = ad.load_checkpoint(str(tmp_path / "model.ckpt"))
    init = Model(config).state_dict()
    assert set(loaded) == set(init)
    for name, arr in init.items():
        np.testing.assert_array_equal(
            loaded[name], arr.astype(np.float32).astype(np.float64))


def test_zero_lr_keeps_parameters_bit_identical():
    config = small_config(optimizer=OptimizerConfig(lr=0.0, steps=3))
    model, log = train(config, small_scene())
    init = Model(config).named_parameters()
    for name, tensor in model.named_parameters().items():
        np.testing.assert_array_equal(tensor.values, init[name].values)
    assert len(log.rows) == 3


def test_loss_decreases_on_synthetic_scene():
    config = small_config(optimizer=OptimizerConfig(steps=30, lr=0.01,
                                                    checkpoint_every=0))
    model, log = train(config, small_scene())
    losses = log.losses()
    assert losses.shape == (30,)
    assert np.all(np.isfinite(losses))
    assert losses[-1] < losses[0]


def test_training_deterministic_per_seed():
    config = small_config(optimizer=OptimizerConfig(steps=4))
    _, log_a = train(config, small_scene())
    _, log_b = train(config, small_scene())
    np.testing.assert_array_equal(log_a.losses(), log_b.losses())
    _, log_c = train(small_config(seed=7,
                                  optimizer=OptimizerConfig(steps=4)),
                     small_scene())
    assert not np.array_equal(log_a.losses(), log_c.losses())


def test_non_finite_loss_aborts_with_crop_diagnostic(tmp_path, monkeypatch):
    # cloud inputs are validated finite, so a NaN loss can only come from
    # divergence inside the step; inject one at the loss node
    import cloudseg.trainer as trainer_module
    monkeypatch.setattr(trainer_module, "_crop_loss",
                        lambda *a, **k: ad.constant(np.array(np.nan)))
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng, 120, extent=0.4)
    with pytest.raises(RuntimeError, match="non-finite loss .* step 0"):
        train(small_config(), cloud, out_dir=str(tmp_path))
    assert (tmp_path / "train_log.tsv").exists()  # log flushed before abort


def test_checkpoints_and_log_files(tmp_path):
    config = small_config(
        optimizer=OptimizerConfig(steps=5, checkpoint_every=2))
    train(config, small_scene(), out_dir=str(tmp_path),
          val_source=small_scene(seed=1))
    names = sorted(os.listdir(tmp_path))
    assert "model.ckpt" in names
    assert "model_000002.ckpt" in names and "model_000004.ckpt" in names
    lines = (tmp_path / "train_log.tsv").read_text().strip().split("\n")
    assert lines[0] == "step\tloss\tlr\tseconds\tval_miou"
    assert len(lines) == 6
    # validation mIoU recorded at checkpoint steps and at the last step
    val_cells = [line.split("\t")[4] for line in lines[1:]]
    assert val_cells[1] != "" and val_cells[3] != "" and val_cells[4] != ""
    assert val_cells[0] == "" and val_cells[2] == ""
    for cell in (val_cells[1], val_cells[4]):
        assert 0.0 <= float(cell) <= 1.0


def test_train_log_round_trips_losses_exactly(tmp_path):
    log = TrainLog()
    log.append(0, 1.0 / 3.0, 0.01, 0.5)
    log.append(1, 0.1234567890123456789, 0.001, 0.5, 0.25)
    path = tmp_path / "log.tsv"
    log.write(str(path))
    lines = path.read_text().strip().split("\n")[1:]
    parsed = [float(line.split("\t")[1]) for line in lines]
    np.testing.assert_array_equal(parsed, log.losses())


# ---------------------------------------------------------------- data feed

def test_cloud_source_resolution():
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng)
    assert len(CloudSource.resolve(cloud)) == 1
    assert len(CloudSource.resolve([cloud, cloud])) == 2
    scene = CloudSource.resolve(small_scene())
    assert len(scene) == 1
    assert scene.get(0).labels is not None
    with pytest.raises(TypeError, match="cloud source"):
        CloudSource.resolve(42)


# ------------------------------------------------------------------- voting

def test_tile_centers_cover_every_point():
    rng = np.random.default_rng(5)
    positions = rng.uniform(-3, 3, size=(300, 3))
    for votes in (1, 2, 3):
        centers = tile_centers(positions, 1.0, votes)
        d = np.linalg.norm(positions[:, None, :] - centers[None, :, :],
                           axis=2)
        cover = (d <= 1.0).sum(axis=1)
        assert np.all(cover >= votes)
    with pytest.raises(ValueError, match="no points"):
        tile_centers(np.zeros((0, 3)), 1.0, 1)


def test_single_sphere_equals_plain_forward():
    rng = np.random.default_rng(6)
    config = small_config()
    cloud = random_cloud(rng, 90, extent=0.3)   # fits one tile
    model = Model(config)
    probs, covered = vote_probabilities(model, cloud, config)
    np.testing.assert_array_equal(covered, 1)
    logits = model.forward(build_pyramid(cloud, config))
    direct = ad.softmax_lastdim(logits).values
    direct /= direct.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(probs, direct, atol=1e-12)


def test_duplicate_votes_keep_probabilities():
    rng = np.random.default_rng(7)
    cloud = random_cloud(rng, 90, extent=0.3)
    model = Model(small_config())
    probs1, cover1 = vote_probabilities(model, cloud, small_config(votes=1))
    probs2, cover2 = vote_probabilities(model, cloud, small_config(votes=2))
    np.testing.assert_array_equal(cover2, 2)
    np.testing.assert_allclose(probs2, probs1, atol=1e-12)
    np.testing.assert_array_equal(np.argmax(probs2, axis=1),
                                  np.argmax(probs1, axis=1))


def test_voting_matches_direct_accumulation_oracle():
    rng = np.random.default_rng(8)
    config = small_config(votes=2)
    cloud = random_cloud(rng, 250, extent=2.2)  # spans several tiles
    model = Model(config)
    probs, covered = vote_probabilities(model, cloud, config)

    expected = np.zeros((len(cloud), config.n_classes))
    count = np.zeros(len(cloud))
    for center in tile_centers(cloud.positions, config.sphere_radius, 2):
        mask = np.linalg.norm(cloud.positions - center, axis=1) \
            <= config.sphere_radius
        if not np.any(mask):
            continue
        crop = PointCloud(cloud.positions[mask], cloud.features[mask])
        logits = model.forward(build_pyramid(crop, config))
        expected[mask] += ad.softmax_lastdim(logits).values
        count[mask] += 1
    expected /= count[:, None]
    expected /= expected.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(probs, expected, atol=1e-12)
    assert np.all(covered >= 2)


def test_vote_probabilities_are_distributions():
    rng = np.random.default_rng(9)
    config = small_config(votes=2)
    cloud = random_cloud(rng, 200, extent=1.8)
    probs, _ = vote_probabilities(Model(config), cloud, config)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- evaluation

def test_evaluate_checkpoint_round_trip(tmp_path):
    config = small_config(optimizer=OptimizerConfig(steps=5))
    train(config, small_scene(), out_dir=str(tmp_path))
    val = [CloudSource.resolve(small_scene(seed=2)).get(0)]
    path = str(tmp_path / "model.ckpt")

    first = evaluate(config, path, val)
    # save the loaded model again: float32 values survive the second trip
    model = Model(config)
    model.load_state_dict(ad.load_checkpoint(path))
    path2 = str(tmp_path / "again.ckpt")
    ad.save_checkpoint(path2, model.state_dict())
    second = evaluate(config, path2, val)
    np.testing.assert_array_equal(first["counts"], second["counts"])
    assert first["miou"] == second["miou"]
    assert 0.0 <= first["miou"] <= 1.0
    assert "mIoU" in first["table"]


# ---------------------------------------------------------------- ablations

def test_ablation_rows_cover_components_and_combines():
    rows = ablation_rows(small_config())
    names = [name for name, _ in rows]
    assert names == ["conv_only", "+second_conv", "+local_attention",
                     "+global_final", "+pga", "combine_hadamard",
                     "combine_add", "combine_subtract"]
    by_name = dict(rows)
    assert by_name["conv_only"].use_second_conv is False
    assert by_name["conv_only"].use_attention is False
    assert by_name["+second_conv"].use_second_conv is True
    assert by_name["+local_attention"].use_attention is True
    assert by_name["+local_attention"].use_global_final is False
    assert by_name["+global_final"].use_global_final is True
    assert by_name["+global_final"].pga.enabled is False
    assert by_name["+pga"].pga.enabled is True
    assert by_name["combine_add"].combine_op == "add"
    for _, config in rows:
        config.validate()


def test_pga_off_equals_theta_zero_step_for_step():
    base = small_config(optimizer=OptimizerConfig(steps=4))
    off = small_config(optimizer=OptimizerConfig(steps=4),
                       pga=PGAConfig(enabled=False, k=8))
    zero = small_config(optimizer=OptimizerConfig(steps=4),
                        pga=PGAConfig(enabled=True, theta=0.0, k=8))
    _, log_off = train(off, small_scene())
    _, log_zero = train(zero, small_scene())
    np.testing.assert_array_equal(log_off.losses(), log_zero.losses())
    # and the weighted run genuinely differs
    _, log_pga = train(base, small_scene())
    assert not np.array_equal(log_off.losses(), log_pga.losses())


def test_format_ablation_table():
    rows = [{"name": "conv_only", "miou": 0.5, "accuracy": 0.75},
            {"name": "+pga", "miou": 0.625, "accuracy": 0.8125}]
    text = format_ablation_table(rows)
    assert "conv_only" in text and "0.6250" in text
    assert text.splitlines()[0].startswith("variant")
