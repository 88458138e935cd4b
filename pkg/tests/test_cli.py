"""End-to-end command-line coverage on a miniature dataset, plus the
config system."""

import json

import numpy as np
import pytest

from tetramorph.cli import main
from tetramorph.config import Config, load_config, parse_config
from tetramorph.data import DataError, read_pose_txt


TINY_CONFIG = """
# miniature setup for fast pipeline runs
lr = 1e-3
batch = 4
grad_accum = 1
epochs = 1
holdout = 0.34
seed = 3
grid_resolution = 6
sdf_layers = 3
sdf_hidden = 24
feat_layers = 3
feat_hidden = 16
deform_layers = 3
deform_hidden = 16
feature_dim = 16
latent_dim = 8
backbone_channels = 12
encoder_dims = 8,8,8,8
encoder_strides = 2,2,2,2
adapter_dims = 16,16,16
adapter_upsample = 1,1,2
vertex_samples = 24
sdf_samples = 64
pretrain_steps = 250
pretrain_radius = 0.6
n_starts = 4
refine_steps = 4
"""


def test_no_args_usage_error(capsys):
    assert main([]) == 1


def test_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == 1


def test_config_defaults_match_documented_table():
    c = Config()
    assert (c.lr, c.batch, c.grad_accum) == (1e-4, 12, 2)
    assert (c.lambda_appearance, c.lambda_chamfer, c.lambda_mask,
            c.lambda_mask_dt) == (0.1, 0.1, 1.0, 100.0)
    assert (c.lambda_eikonal, c.lambda_deform, c.lambda_deform_smooth) == \
        (0.01, 0.1, 0.01)
    assert c.temperature == 14.3
    assert c.vertex_samples == 150
    assert c.grid_resolution == 16
    assert c.encoder_dims == (256, 256, 256, 256)
    assert c.encoder_strides == (2, 2, 2, 2)
    assert c.adapter_dims == (512, 512, 128)
    assert c.adapter_upsample == (1, 1, 2)
    assert (c.sdf_layers, c.sdf_hidden) == (5, 256)
    assert (c.feat_layers, c.feat_hidden, c.feature_dim) == (5, 256, 128)
    assert (c.deform_layers, c.deform_hidden) == (5, 256)


def test_config_parse_override_and_unknown_key():
    cfg = parse_config("lr = 0.5\nencoder_dims = 1,2,3,4\ndeterministic = false\n")
    assert cfg.lr == 0.5
    assert cfg.encoder_dims == (1, 2, 3, 4)
    assert cfg.deterministic is False
    with pytest.raises(DataError):
        parse_config("no_such_key = 1\n")
    with pytest.raises(DataError):
        parse_config("lr 0.5\n")
    # round trip through the echo format
    echo = cfg.as_text()
    cfg2 = parse_config(echo)
    assert cfg2 == cfg


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-synth -> train once; later tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    out_dir = root / "run"
    cfg_path = root / "tiny.cfg"
    cfg_path.write_text(TINY_CONFIG)
    rc = main(["gen-synth", "--family", "sphere", "--videos", "3",
               "--frames", "3", "--out", str(data_dir), "--seed", "5",
               "--image-size", "32", "--feat-size", "16",
               "--feature-dim", "12"])
    assert rc == 0
    rc = main(["train", "--config", str(cfg_path), "--category", "sphere",
               "--out", str(out_dir), "--dataset", str(data_dir)])
    assert rc == 0
    return root, data_dir, out_dir, cfg_path


def test_train_outputs_exist(pipeline):
    _, _, out_dir, _ = pipeline
    for name in ("model.mcm", "checkpoint_template.mcm",
                 "checkpoint_joint.mcm", "config.txt", "camera.txt",
                 "train_log.txt"):
        assert (out_dir / name).exists(), name
    cfg = load_config(out_dir / "config.txt")
    assert cfg.grid_resolution == 6
    log = (out_dir / "train_log.txt").read_text()
    assert "stage=template" in log and "stage=joint" in log
    assert "holdout" in log


def test_train_rejects_channel_mismatch(pipeline, tmp_path):
    root, data_dir, _, _ = pipeline
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text(TINY_CONFIG.replace("backbone_channels = 12",
                                           "backbone_channels = 99"))
    rc = main(["train", "--config", str(bad_cfg), "--category", "sphere",
               "--out", str(tmp_path / "o"), "--dataset", str(data_dir)])
    assert rc == 2


def test_export_mesh_cli(pipeline, tmp_path):
    _, _, out_dir, _ = pipeline
    obj = tmp_path / "template.obj"
    assert main(["export-mesh", "--model", str(out_dir), "--out", str(obj)]) == 0
    text = obj.read_text()
    assert text.startswith("v ")
    assert " 1 " not in text.splitlines()[0]


def test_render_debug_cli(pipeline, tmp_path):
    _, data_dir, out_dir, _ = pipeline
    dbg = tmp_path / "dbg"
    feat = data_dir / "sphere" / "video_000" / "frame_00000.feat"
    rc = main(["render-debug", "--model", str(out_dir), "--out", str(dbg),
               "--features", str(feat),
               "--camera", str(out_dir / "camera.txt")])
    assert rc == 0
    assert (dbg / "mask.pgm").read_bytes().startswith(b"P5")
    assert (dbg / "features_pca.ppm").read_bytes().startswith(b"P6")


def test_infer_pose_cli(pipeline, tmp_path):
    _, data_dir, out_dir, _ = pipeline
    feat = data_dir / "sphere" / "video_000" / "frame_00001.feat"
    out_pose = tmp_path / "est.pose.txt"
    rc = main(["infer-pose", "--model", str(out_dir), "--features", str(feat),
               "--out-pose", str(out_pose), "--starts", "2", "--steps", "2"])
    assert rc == 0
    pose = read_pose_txt(out_pose, 32, 32)
    assert np.max(np.abs(pose.matrix.T @ pose.matrix - np.eye(3))) < 1e-8


def test_eval_cli_report(pipeline, tmp_path):
    _, data_dir, out_dir, _ = pipeline
    report = tmp_path / "report.json"
    rc = main(["eval", "--model", str(out_dir),
               "--dataset", str(data_dir / "sphere"),
               "--report", str(report), "--views", "2", "--starts", "2",
               "--steps", "2"])
    assert rc == 0
    rep = json.loads(report.read_text())
    assert rep["summary"]["views"] == 2 == len(rep["samples"])
    errs = [r["rotation_error_deg"] for r in rep["samples"]]
    assert rep["summary"]["acc30"] == np.mean([e <= 30 for e in errs])
    assert {"video", "frame", "rotation_error_deg", "iou", "score"} \
        <= set(rep["samples"][0])


def test_eval_missing_dataset_exit_2(pipeline, tmp_path):
    _, _, out_dir, _ = pipeline
    rc = main(["eval", "--model", str(out_dir), "--dataset",
               str(tmp_path / "nope"), "--report", str(tmp_path / "r.json")])
    assert rc == 2


def test_gen_synth_deterministic_cli(tmp_path):
    for sub in ("a", "b"):
        rc = main(["gen-synth", "--family", "sphere", "--videos", "1",
                   "--frames", "2", "--out", str(tmp_path / sub),
                   "--seed", "9", "--image-size", "32", "--feat-size", "16",
                   "--feature-dim", "12"])
        assert rc == 0
    fa = sorted((tmp_path / "a").rglob("*"))
    fb = sorted((tmp_path / "b").rglob("*"))
    for a, b in zip(fa, fb):
        if a.is_file():
            assert a.read_bytes() == b.read_bytes()
