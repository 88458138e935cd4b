"""Metrics, correspondence transfer, and the pose objective's structure."""

import numpy as np
import pytest

from tetramorph.autodiff import ContractError
from tetramorph.camera import random_rotations, rotation_about
from tetramorph import data as D
from tetramorph.fields import FieldSpec
from tetramorph.infer import (CorrespondenceIndex, PoseScorer,
                              default_rotation_starts, estimate_pose,
                              evaluate, geodesic_error, instance_iou,
                              pck_hit, render_instance_mask)
from tetramorph.model import new_model, pretrain_template_sphere
from tetramorph.train import TrainConfig, train_template, train_joint


SMALL = FieldSpec(
    feature_dim=12, latent_dim=8, backbone_channels=12,
    sdf_layers=3, sdf_hidden=24, feat_layers=3, feat_hidden=16,
    deform_layers=3, deform_hidden=16,
    encoder_dims=(8, 8, 8, 8), encoder_strides=(2, 2, 2, 2),
    adapter_dims=(12, 12, 12), adapter_upsample=(1, 1, 2),
)


@pytest.fixture(scope="module")
def sphere_model():
    m = new_model(SMALL, grid_resolution=6, seed=2, temperature=14.3,
                  vertex_samples=24, dtype=np.float64)
    pretrain_template_sphere(m, radius=0.6, steps=400, lr=1e-2, seed=1)
    return m


@pytest.fixture(scope="module")
def tiny_synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    spec = D.SyntheticSpec(family="sphere", n_videos=2, frames=4, seed=9,
                           image_size=32, feat_size=16, feature_dim=12,
                           cloud_points=300, focal=28.0)
    cat, records = D.gen_synthetic(root, spec)
    return cat, records, spec


def test_geodesic_error_examples():
    rng = np.random.default_rng(0)
    R = random_rotations(rng, 1)[0]
    assert geodesic_error(R, R) == 0.0
    assert abs(geodesic_error(np.eye(3), rotation_about([0, 0, 1], 180)) - 180) < 1e-9
    axis = rng.normal(size=3)
    assert abs(geodesic_error(np.eye(3), rotation_about(axis, 30)) - 30) < 1e-6


def test_geodesic_error_metric_properties():
    rng = np.random.default_rng(1)
    for _ in range(10):
        A, B, C = random_rotations(rng, 3)
        ab = geodesic_error(A, B)
        assert abs(ab - geodesic_error(B, A)) < 1e-9
        assert geodesic_error(A, A) < 1e-5  # arccos resolution near zero
        assert ab <= geodesic_error(A, C) + geodesic_error(C, B) + 1e-6


def test_instance_iou_examples():
    a = np.zeros((4, 4), bool)
    a[:2, :2] = True
    assert instance_iou(a, a) == 1.0
    b = np.zeros((4, 4), bool)
    b[2:, 2:] = True
    assert instance_iou(a, b) == 0.0
    # half-overlapping equal squares: intersection 1, union 3
    c = np.zeros((4, 4), bool)
    c[:2, 1:3] = True
    half = np.zeros((4, 4), bool)
    half[:2, :2] = True
    assert abs(instance_iou(half, c) - 1.0 / 3.0) < 1e-12
    assert instance_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ContractError):
        instance_iou(np.zeros((2, 2)), np.zeros((3, 3)))


def test_iou_monotone_under_growing_intersection():
    # prediction grows inside the target: union fixed, intersection grows
    base = np.zeros((8, 8), bool)
    base[2:6, 2:6] = True
    prev = 0.0
    for k in range(2, 6):
        pred = np.zeros((8, 8), bool)
        pred[2:k + 1, 2:6] = True
        val = instance_iou(pred | base & pred, base)
        assert val > prev
        prev = val
    assert prev == 1.0


def test_pck_hit_boundaries():
    assert pck_hit((5, 5), (5, 5), (20, 10))
    assert pck_hit((5.0, 5.0), (5.0, 7.0), (20, 10))       # 2 == 0.1 * 20
    assert not pck_hit((5.0, 5.0), (5.0, 9.1), (20, 10))   # ~2x threshold
    with pytest.raises(ContractError):
        pck_hit((0, 0), (0, 0), (0, 5))


def test_default_rotation_starts_count_and_spread():
    starts = default_rotation_starts(12)
    assert len(starts) == 12
    angles = [geodesic_error(starts[0], R) for R in starts[1:]]
    assert min(angles) > 20.0


def test_self_correspondence_and_pure_backbone_blend(sphere_model, tiny_synth):
    _, records, spec = tiny_synth
    sample = records[0].samples[0]
    # center-of-mask keypoint at adapted resolution
    mask = sample.mask > 0
    rows, cols = np.nonzero(mask)
    r = int(rows.mean() * (2 * spec.feat_size) / spec.image_size)
    c = int(cols.mean() * (2 * spec.feat_size) / spec.image_size)

    idx = CorrespondenceIndex(sphere_model, sample.feature_map,
                              sample.feature_map)
    (tr, tc), inside = idx.transfer((r, c), mask=sample.mask)
    assert (tr, tc) == (r, c)
    assert inside

    pure = CorrespondenceIndex(sphere_model, sample.feature_map,
                               sample.feature_map, blend=(1.0, 0.0))
    (pr, pc), _ = pure.transfer((r, c))
    sim = (pure.src_raw[:, r, c]
           @ pure.tgt_raw.reshape(pure.tgt_raw.shape[0], -1))
    flat = int(np.argmax(sim))
    assert (pr, pc) == (flat // pure.shape[1], flat % pure.shape[1])


def test_keypoint_outside_mask_flagged(sphere_model, tiny_synth):
    _, records, _ = tiny_synth
    sample = records[0].samples[0]
    idx = CorrespondenceIndex(sphere_model, sample.feature_map,
                              sample.feature_map)
    corner = (0, 0)
    (_, _), inside = idx.transfer(corner, mask=sample.mask)
    assert not inside


def self_consistent_scorer(model, pose, rng):
    """Scorer whose image side is the model's own render at the pose's
    rotation: the objective must peak at that rotation."""
    fmap = rng.normal(size=(model.spec.backbone_channels, 16, 16)).astype(np.float32)
    scorer = PoseScorer(model, fmap, pose)
    from tetramorph.render import rasterize
    from tetramorph.tetgrid import Mesh
    from tetramorph.autodiff import Tape

    t = Tape(dtype=np.float64)
    mesh = Mesh(t.leaf(scorer.verts), scorer.faces,
                np.zeros((len(scorer.verts), 2), np.int64),
                np.zeros(len(scorer.verts)), t.leaf(scorer.vert_feats))
    render = rasterize(mesh, scorer.pose, with_soft_mask=False)
    pixels = np.tile(scorer.beta, (scorer.npix, 1))
    if render.cov_pixels.size:
        f = render.cov_features.v
        f = f / np.linalg.norm(f, axis=1, keepdims=True)
        pixels[render.cov_pixels] = f
    scorer.pixels = pixels
    logits = scorer.kappa * (pixels @ scorer.sampled_feats.T)
    bg = scorer.kappa * (pixels @ scorer.beta)
    m = max(logits.max(), bg.max())
    scorer.z = np.exp(logits - m).sum(axis=1) + np.exp(bg - m)
    scorer.bg_num = np.exp(bg - m)
    scorer.log_shift = m
    scorer.bg_prob = scorer.bg_num / scorer.z
    return scorer


def test_pose_objective_peaks_at_true_rotation(sphere_model):
    rng = np.random.default_rng(5)
    R_true = random_rotations(rng, 1)[0]
    pose = D.CameraPose.from_matrix(R_true, np.array([0, 0, 3.0]), 28.0, 28.0,
                                    16.0, 16.0, 32, 32)
    scorer = self_consistent_scorer(sphere_model, pose, rng)
    s_true = scorer.score_at(R_true)
    for _ in range(6):
        pert = rotation_about(rng.normal(size=3), 30.0) @ R_true
        assert s_true > scorer.score_at(pert)


def test_pose_refinement_improves_score_and_respects_inits(sphere_model):
    rng = np.random.default_rng(6)
    R_true = random_rotations(rng, 1)[0]
    pose = D.CameraPose.from_matrix(R_true, np.array([0, 0, 3.0]), 28.0, 28.0,
                                    16.0, 16.0, 32, 32)
    scorer = self_consistent_scorer(sphere_model, pose, rng)

    import tetramorph.infer as infer_mod
    orig = infer_mod.PoseScorer
    infer_mod.PoseScorer = lambda *a, **k: scorer
    try:
        near = rotation_about(rng.normal(size=3), 12.0) @ R_true
        hyp = estimate_pose(sphere_model, np.zeros((12, 16, 16), np.float32),
                            pose, steps=25, inits=[near])
        err = geodesic_error(hyp.matrix, R_true)
        init_score = scorer.score_at(near) * scorer.npix
        assert hyp.score >= init_score - 1e-9
        assert err < geodesic_error(near, R_true) + 1e-6
        assert err < 6.0
    finally:
        infer_mod.PoseScorer = orig


def test_ranking_invariant_to_temperature_scaling(sphere_model):
    rng = np.random.default_rng(7)
    R_true = random_rotations(rng, 1)[0]
    pose = D.CameraPose.from_matrix(R_true, np.array([0, 0, 3.0]), 28.0, 28.0,
                                    16.0, 16.0, 32, 32)
    starts = default_rotation_starts(6)

    def ranking(temp_scale):
        scorer = self_consistent_scorer(sphere_model, pose,
                                        np.random.default_rng(7))
        scorer.kappa *= temp_scale
        logits = scorer.kappa * (scorer.pixels @ scorer.sampled_feats.T)
        bg = scorer.kappa * (scorer.pixels @ scorer.beta)
        m = max(logits.max(), bg.max())
        scorer.z = np.exp(logits - m).sum(axis=1) + np.exp(bg - m)
        scorer.bg_num = np.exp(bg - m)
        scorer.log_shift = m
        scorer.bg_prob = scorer.bg_num / scorer.z
        return int(np.argmax([scorer.score_at(R) for R in starts]))

    assert ranking(1.0) == ranking(1.5)


def test_render_instance_mask_runs(sphere_model, tiny_synth):
    _, records, _ = tiny_synth
    sample = records[0].samples[0]
    mask = render_instance_mask(sphere_model, sample.feature_map, sample.pose)
    assert mask.shape == (32, 32)
    assert 0.0 <= mask.min() and mask.max() <= 1.0
    assert (mask > 0.5).any()


@pytest.mark.slow
def test_evaluate_structure_and_report_consistency(tiny_synth):
    cat, records, _ = tiny_synth
    model = new_model(SMALL, grid_resolution=6, seed=3, vertex_samples=24)
    cfg = TrainConfig(lr=1e-3, batch=4, grad_accum=1, epochs=1, holdout=0.5,
                      seed=0, sdf_samples=64, pretrain_steps=250,
                      pretrain_radius=0.6, pretrain_lr=1e-2)
    ck = train_template(records, cfg, model)
    ck = train_joint(records, cfg, ck)
    meta = D.load_synthetic_meta(cat)
    rep = evaluate(ck.model, records[:1], n_views=2, n_starts=2, steps=3,
                   synthetic_meta=meta, pairs_per_video=1,
                   keypoints_per_pair=4)
    assert len(rep["samples"]) == 2
    errs = [r["rotation_error_deg"] for r in rep["samples"]]
    assert rep["summary"]["acc30"] == np.mean([e <= 30 for e in errs])
    ious = [r["iou"] for r in rep["samples"]]
    assert rep["summary"]["mean_iou"] == round(float(np.mean(ious)), 6)
    total_kp = sum(r["keypoints"] for r in rep["pairs"])
    total_hit = sum(r["hits"] for r in rep["pairs"])
    if total_kp:
        assert rep["summary"]["pck"] == round(total_hit / total_kp, 6)
    assert all(0 <= r["iou"] <= 1 for r in rep["samples"])
