"""End-to-end checks of the command-line surface and its exit codes."""

import os

import numpy as np
import pytest

from cloudseg.cli import _adapt_to_scene, main
from cloudseg.config import ConfigError, NetworkConfig
from cloudseg.data_io import default_remap, generate_scene, scene_preset, write_kitti_scan

# shared desk-scale shrink so every CLI run stays under a second per step
TINY = [
    "--set", "n_layers=2",
    "--set", "base_width=8",
    "--set", "cell_0=0.08",
    "--set", "min_crop_points=16",
    "--set", "pga.k=8",
    "--set", "optimizer.steps=4",
    "--set", "optimizer.checkpoint_every=0",
]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny trained run reused by the eval/predict round trips."""
    out_dir = tmp_path_factory.mktemp("run")
    code = main(["train", "--synthetic", "two_class", "--out", str(out_dir),
                 *TINY])
    assert code == 0
    return out_dir


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "usage: cloudseg" in capsys.readouterr().out


def test_subcommand_help_exits_zero(capsys):
    assert main(["train", "--help"]) == 0
    assert "--synthetic" in capsys.readouterr().out


def test_no_subcommand_exits_two(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exits_two(capsys):
    assert main(["train", "--frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_data_source_exits_two(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path / "x"), *TINY])
    assert code == 2
    assert "--data" in capsys.readouterr().err


def test_both_data_sources_exit_two(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path / "x"), "--data", str(tmp_path),
                 "--synthetic", "two_class", *TINY])
    assert code == 2
    assert "mutually exclusive" in capsys.readouterr().err


def test_malformed_config_file_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("n_layers: [unclosed\n", encoding="utf-8")
    code = main(["train", "--synthetic", "two_class",
                 "--out", str(tmp_path / "x"), "--config", str(bad)])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_unknown_override_exits_two(tmp_path, capsys):
    code = main(["train", "--synthetic", "two_class",
                 "--out", str(tmp_path / "x"), "--set", "n_layerz=2"])
    assert code == 2
    assert "n_layerz" in capsys.readouterr().err


def test_bad_override_value_exits_two(tmp_path, capsys):
    code = main(["train", "--synthetic", "two_class",
                 "--out", str(tmp_path / "x"), "--set", "n_layers=0"])
    assert code == 2


def test_wrong_override_type_exits_two(tmp_path, capsys):
    code = main(["train", "--synthetic", "two_class",
                 "--out", str(tmp_path / "x"), "--set", "optimizer.steps=abc"])
    assert code == 2
    assert "optimizer.steps expects int" in capsys.readouterr().err


def test_missing_checkpoint_exits_one(capsys):
    code = main(["eval", "--synthetic", "two_class",
                 "--checkpoint", "/nonexistent/model.ckpt", *TINY])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_interrupt_exits_130(monkeypatch, capsys):
    # a Ctrl-C mid-run should end with one line, not a traceback
    import cloudseg.cli as cli_module

    def boom(config, source, **kwargs):
        raise KeyboardInterrupt

    monkeypatch.setattr(cli_module.trainer, "train", boom)
    code = main(["train", "--synthetic", "two_class", "--out", "/tmp/x", *TINY])
    assert code == 130
    assert "interrupted" in capsys.readouterr().err


def test_train_writes_outputs(trained):
    assert (trained / "model.ckpt").is_file()
    log = (trained / "train_log.tsv").read_text(encoding="utf-8")
    lines = log.strip().split("\n")
    assert lines[0] == "step\tloss\tlr\tseconds\tval_miou"
    assert len(lines) == 1 + 4


def test_eval_prints_iou_table(trained, capsys):
    code = main(["eval", "--synthetic", "two_class", "--scene-seed", "1",
                 "--checkpoint", str(trained / "model.ckpt"), *TINY])
    assert code == 0
    out = capsys.readouterr().out
    assert "plane" in out and "poles" in out and "mIoU" in out


def test_predict_round_trip(trained, tmp_path, capsys):
    # labels for a synthetic-shaped scan live in the first two raw-id slots
    scene = generate_scene(scene_preset("two_class", seed=3))
    scan_path = tmp_path / "scan.bin"
    intensity = scene.features[:, 0]
    write_kitti_scan(str(scan_path), scene.positions, intensity)

    label_path = tmp_path / "pred.label"
    ply_path = tmp_path / "pred.ply"
    code = main(["predict", "--checkpoint", str(trained / "model.ckpt"),
                 "--scan", str(scan_path), "--out", str(label_path),
                 "--ply", str(ply_path), *TINY,
                 "--set", "n_classes=2", "--set", "sphere_radius=1.0"])
    assert code == 0
    assert "wrote" in capsys.readouterr().out

    raw = np.fromfile(label_path, dtype="<u4")
    assert raw.shape == (len(scene),)
    remap = default_remap()
    valid_raw = set(remap.to_raw_ids(np.arange(2)).tolist())
    assert set(np.unique(raw).tolist()) <= valid_raw

    with open(ply_path, "r", encoding="utf-8") as fh:
        assert fh.readline().strip() == "ply"


def test_pga_score_synthetic(tmp_path, capsys):
    ply_path = tmp_path / "scores.ply"
    code = main(["pga-score", "--synthetic", "three_class",
                 "--out", str(ply_path)])
    assert code == 0
    assert "boundary fraction" in capsys.readouterr().out
    header = ply_path.read_text(encoding="utf-8").split("end_header")[0]
    assert "property float scalar" in header


def test_pga_score_scan_needs_labels(tmp_path, capsys):
    code = main(["pga-score", "--scan", str(tmp_path / "a.bin"),
                 "--out", str(tmp_path / "o.ply")])
    assert code == 2
    assert "--labels" in capsys.readouterr().err


def test_gradcheck_single_seed(capsys):
    code = main(["gradcheck", "--seeds", "1"])
    assert code == 0
    out = capsys.readouterr().out
    assert "max relative error" in out
    assert "op:" in out and "layer:" in out


def test_bench_neighbors_runs(capsys):
    code = main(["bench-neighbors", "--sizes", "200, 400", "--radius", "0.3"])
    assert code == 0
    out = capsys.readouterr().out
    assert "points" in out and out.count("\n") >= 3


def test_bench_neighbors_bad_sizes(capsys):
    assert main(["bench-neighbors", "--sizes", "0"]) == 2
    assert main(["bench-neighbors", "--sizes", ""]) == 2


def test_synthetic_defaults_adapt():
    adapted = _adapt_to_scene(NetworkConfig(), "two_class")
    assert adapted.n_classes == 2
    assert adapted.sphere_radius == 1.0


def test_synthetic_respects_explicit_values():
    explicit = NetworkConfig(n_classes=4, sphere_radius=2.0)
    adapted = _adapt_to_scene(explicit, "three_class")
    assert adapted.n_classes == 4
    assert adapted.sphere_radius == 2.0


def test_synthetic_rejects_too_few_classes():
    with pytest.raises(ConfigError, match="3 classes"):
        _adapt_to_scene(NetworkConfig(n_classes=2), "three_class")
