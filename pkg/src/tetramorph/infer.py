"""Inference: 3-DoF pose by inverse rendering, instance segmentation,
semantic correspondence, and the evaluation metrics.

Pose estimation maximizes, over the object rotation, the per-pixel
probability that the rendered surface descriptor explains the image
descriptor, with the background descriptor competing for uncovered
pixels:

    score = sum_covered p(f_rendered | f_image) + sum_background p(bg | f_image)

The similarity denominators depend only on the image, so they are
precomputed per view; each ascent step differentiates the rendered-slot
numerators through barycentric interpolation and the rotation. Rotation
hypotheses start from a uniform yaw grid at three elevations and are
refined independently; the best scoring pose wins (ties to the
lowest-index start).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Tape, l2_normalize
from .camera import (CameraPose, axis_angle_to_matrix, geodesic_degrees,
                     matrix_to_axis_angle, rotation_about, rotation_var)
from .losses import farthest_point_sample
from .model import Model
from .nets import AdamState, adam_step
from .render import rasterize
from .tetgrid import Mesh
from .train import replace_pose_resolution


@dataclass
class PoseHypothesis:
    rotation: np.ndarray   # (3,) axis-angle
    score: float           # pixel-summed objective at this rotation

    @property
    def matrix(self):
        return axis_angle_to_matrix(self.rotation)


def default_rotation_starts(n=12):
    """Uniform yaw grid crossed with two elevations (+-30 degrees).

    For the default n=12 this gives 60-degree yaw spacing, which keeps
    every rotation within reach of some start's refinement basin.
    """
    n_yaw = max(1, n // 2)
    out = []
    for elev in (-30.0, 30.0):
        for k in range(n_yaw):
            yaw = 360.0 * k / n_yaw
            out.append(rotation_about([1, 0, 0], elev)
                       @ rotation_about([0, 1, 0], yaw))
            if len(out) == n:
                return out
    return out


class PoseScorer:
    """Per-view state for the inverse-rendering objective."""

    def __init__(self, model: Model, feature_map, pose: CameraPose,
                 temperature=None):
        self.model = model
        self.kappa = model.temperature if temperature is None else temperature
        tape = Tape(dtype=np.float64)
        bound = model.bind(tape)
        mesh, _ = model.template_mesh(tape, bound)
        if mesh.face_count == 0:
            raise ContractError("cannot estimate pose: template mesh is empty")
        self.latent = bound.encode_latent(feature_map).v.copy()
        t2 = Tape(dtype=np.float64)
        bound2 = model.bind(t2)
        self.verts = bound2.deform(mesh.positions.astype(np.float64),
                                   self.latent).v.copy()
        self.faces = mesh.faces
        self.vert_feats = bound2.vertex_features(self.verts).v.copy()
        sample_ids = farthest_point_sample(
            self.verts, min(model.vertex_samples, len(self.verts)))
        self.sampled_feats = self.vert_feats[sample_ids]
        self.beta = bound2.background().v.copy()

        adapted = bound2.adapt_features(feature_map).v
        d, ah, aw = adapted.shape
        self.pose = replace_pose_resolution(pose, ah, aw)
        self.pixels = adapted.reshape(d, ah * aw).T.astype(np.float64)
        logits = self.kappa * (self.pixels @ self.sampled_feats.T)
        bg = self.kappa * (self.pixels @ self.beta)
        m = max(logits.max(), bg.max())
        self.z = np.exp(logits - m).sum(axis=1) + np.exp(bg - m)
        self.bg_num = np.exp(bg - m)
        self.log_shift = m
        self.bg_prob = self.bg_num / self.z
        self.npix = ah * aw

    def score_and_grad(self, axis_angle):
        """Objective (pixel mean) and its gradient in the rotation."""
        tape = Tape(dtype=np.float64)
        aa = tape.leaf(np.asarray(axis_angle, dtype=np.float64))
        R = rotation_var(aa)
        mesh = Mesh(tape.leaf(self.verts), self.faces,
                    np.zeros((len(self.verts), 2), np.int64),
                    np.zeros(len(self.verts)), tape.leaf(self.vert_feats))
        render = rasterize(mesh, self.pose, rotation=R, with_soft_mask=False)
        base = float(self.bg_prob.sum())
        if render.cov_pixels.size == 0:
            return base / self.npix, np.zeros(3)
        f_r = l2_normalize(render.cov_features, axis=1, eps=1e-12)
        s_cov = self.pixels[render.cov_pixels]
        num = ((f_r * s_cov).sum(axis=1) * self.kappa - self.log_shift).exp()
        zc = self.z[render.cov_pixels]
        bgc = self.bg_num[render.cov_pixels]
        score = ((num - bgc) / zc).sum() + base
        mean_score = score / self.npix
        g = tape.backward(seeds=[(score, np.ones(()))]).of(aa)
        return float(mean_score.v), g / self.npix

    def score_at(self, rotation_matrix):
        return self.score_and_grad(matrix_to_axis_angle(rotation_matrix))[0]


def estimate_pose(model: Model, feature_map, pose: CameraPose, n_starts=12,
                  steps=30, lr=0.05, plateau=1e-5, inits=None,
                  temperature=None) -> PoseHypothesis:
    """Best rotation over refined uniform starts.

    ``pose`` supplies the fixed translation and intrinsics (objects are
    centered by the dataset convention); only the rotation is optimized.
    Returns the best hypothesis; its score is the pixel-summed objective.
    """
    scorer = PoseScorer(model, feature_map, pose, temperature=temperature)
    starts = inits if inits is not None else default_rotation_starts(n_starts)
    best = None
    for R0 in starts:
        aa = matrix_to_axis_angle(R0)
        if np.linalg.norm(aa) < 1e-9:
            aa = np.array([1e-6, 0.0, 0.0])  # keep the rotation map regular
        params = {"aa": aa.astype(np.float64).copy()}
        adam = AdamState(lr=lr)
        prev = None
        traj_best = None
        for _ in range(max(1, steps)):
            s, g = scorer.score_and_grad(params["aa"])
            if traj_best is None or s > traj_best[0]:
                traj_best = (s, params["aa"].copy())
            if prev is not None and abs(s - prev) < plateau:
                break
            prev = s
            adam_step(adam, params, {"aa": -g})  # ascend
        s_final, _ = scorer.score_and_grad(params["aa"])
        if s_final > traj_best[0]:
            traj_best = (s_final, params["aa"].copy())
        if best is None or traj_best[0] > best[0]:
            best = traj_best
    return PoseHypothesis(best[1], best[0] * scorer.npix)


def geodesic_error(R1, R2) -> float:
    """Relative rotation angle in degrees."""
    return geodesic_degrees(R1, R2)


def instance_iou(mask_pred, mask_true) -> float:
    """Intersection over union of binarized masks; defined as 1 when both
    are empty."""
    a = np.asarray(mask_pred) > 0
    b = np.asarray(mask_true) > 0
    if a.shape != b.shape:
        raise ContractError("IoU needs aligned resolutions")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def pck_hit(pred, target, bbox_hw, tau=0.1) -> bool:
    """Keypoint transfer hit: within tau times the larger box dimension
    (inclusive boundary)."""
    if bbox_hw[0] <= 0 or bbox_hw[1] <= 0:
        raise ContractError("invalid bounding box")
    d = float(np.linalg.norm(np.asarray(pred, float) - np.asarray(target, float)))
    return d <= tau * max(bbox_hw) + 1e-12


def render_instance_mask(model: Model, feature_map, pose: CameraPose,
                         rotation=None, gamma=1e-2, soft_faces=8):
    """Soft silhouette of the deformed instance at a given rotation
    (defaults to the pose's own)."""
    tape = Tape(dtype=np.float64)
    bound = model.bind(tape)
    mesh, _ = model.template_mesh(tape, bound)
    latent = bound.encode_latent(feature_map)
    v_def = bound.deform(mesh.positions.astype(np.float64), latent)
    dmesh = Mesh(v_def, mesh.faces, mesh.vertex_nodes, mesh.vertex_t)
    use = pose
    if rotation is not None:
        use = CameraPose.from_matrix(rotation, pose.translation, pose.fx,
                                     pose.fy, pose.cx, pose.cy, pose.height,
                                     pose.width)
    out = rasterize(dmesh, use, gamma=gamma, soft_faces=soft_faces)
    return out.mask.v.copy()


class CorrespondenceIndex:
    """Per-image-pair state for semantic correspondence transfer."""

    def __init__(self, model: Model, src_map, tgt_map, blend=(0.8, 0.2)):
        self.blend = blend
        tape = Tape(dtype=np.float64)
        bound = model.bind(tape)
        mesh, _ = model.template_mesh(tape, bound)
        self.vert_feats = bound.vertex_features(
            mesh.positions.astype(np.float64)).v
        self.src_adapted = bound.adapt_features(src_map).v
        self.tgt_adapted = bound.adapt_features(tgt_map).v
        _, h, w = self.src_adapted.shape
        self.shape = (h, w)
        self.src_raw = _upsample_unit(src_map, h, w)
        self.tgt_raw = _upsample_unit(tgt_map, h, w)

    def transfer(self, src_px, mask=None):
        """Map a source pixel (row, col) to the best target pixel.

        Combines backbone-feature similarity with the matched vertex
        descriptor's similarity to the target's adapted features. Returns
        (pixel, inside_mask_flag).
        """
        r, c = int(src_px[0]), int(src_px[1])
        h, w = self.shape
        if not (0 <= r < h and 0 <= c < w):
            raise ContractError("source keypoint outside the feature grid")
        inside = True
        if mask is not None:
            mr = int(r * mask.shape[0] / h)
            mc = int(c * mask.shape[1] / w)
            inside = bool(mask[mr, mc] > 0)
        s_vec = self.src_adapted[:, r, c]
        best_vertex = int(np.argmax(self.vert_feats @ s_vec))
        sim_vert = (self.vert_feats[best_vertex]
                    @ self.tgt_adapted.reshape(self.tgt_adapted.shape[0], -1))
        raw_vec = self.src_raw[:, r, c]
        sim_raw = raw_vec @ self.tgt_raw.reshape(self.tgt_raw.shape[0], -1)
        score = self.blend[0] * sim_raw + self.blend[1] * sim_vert
        flat = int(np.argmax(score))
        return (flat // w, flat % w), inside


def _upsample_unit(fmap, h, w):
    """Bilinear channel-wise resize to (h, w), unit-normalized per pixel.
    Bilinear (not nearest) so neighboring pixels stay distinct."""
    fmap = np.asarray(fmap, dtype=np.float64)
    c, fh, fw = fmap.shape
    ys = (np.arange(h) + 0.5) * fh / h - 0.5
    xs = (np.arange(w) + 0.5) * fw / w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, fh - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, fw - 1)
    y1 = np.minimum(y0 + 1, fh - 1)
    x1 = np.minimum(x0 + 1, fw - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    a = fmap[:, y0][:, :, x0]
    b = fmap[:, y0][:, :, x1]
    cc = fmap[:, y1][:, :, x0]
    d = fmap[:, y1][:, :, x1]
    up = (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
          + cc * wy * (1 - wx) + d * wy * wx)
    n = np.linalg.norm(up, axis=0, keepdims=True)
    return up / np.maximum(n, 1e-12)


def semantic_correspondence(model, src_map, src_px, tgt_map, mask=None,
                            blend=(0.8, 0.2)):
    """One-shot wrapper over CorrespondenceIndex.transfer."""
    return CorrespondenceIndex(model, src_map, tgt_map, blend).transfer(
        src_px, mask=mask)


# -- evaluation ---------------------------------------------------------------------

def _correspondence_ground_truth(meta, rec, src, tgt, n_keypoints):
    """Exact keypoint pairs for a synthetic frame pair by ray casting the
    generating shape: (src pixels, tgt pixels, tgt bbox), all at the
    adapted feature resolution."""
    from . import data as D

    shape = D.shape_from_meta(meta, rec.video_id)
    fh = 2 * src.feature_map.shape[1]
    fw = 2 * src.feature_map.shape[2]
    sy = fh / src.pose.height
    sx = fw / src.pose.width

    def cast(sample):
        p = sample.pose
        return D._render_analytic(shape, p.matrix, p.translation, fh, fw,
                                  p.fx * sx, p.fy * sy, p.cx * sx, p.cy * sy)

    src_hit, src_pts = cast(src)
    tgt_hit, tgt_pts = cast(tgt)
    if not tgt_hit.any() or not src_hit.any():
        return [], [], (1, 1)
    rows, cols = np.nonzero(src_hit)
    coords = np.stack([rows, cols], axis=1).astype(np.float64)
    picks = farthest_point_sample(coords, min(n_keypoints * 3, len(coords)))
    p = tgt.pose
    R, t = p.matrix, p.translation
    src_kps, tgt_kps = [], []
    for pick in picks:
        if len(src_kps) >= n_keypoints:
            break
        r, c = rows[pick], cols[pick]
        x = src_pts[r, c]
        cam = R @ x + t
        if cam[2] <= 1e-6:
            continue
        u = p.fx * sx * cam[0] / cam[2] + p.cx * sx
        v = p.fy * sy * cam[1] / cam[2] + p.cy * sy
        tr, tc = int(v), int(u)
        if not (0 <= tr < fh and 0 <= tc < fw):
            continue
        if not tgt_hit[tr, tc]:
            continue
        if np.linalg.norm(tgt_pts[tr, tc] - x) > 0.08:
            continue  # occluded: the pixel sees a different surface point
        src_kps.append((r, c))
        tgt_kps.append((tr, tc))
    trows, tcols = np.nonzero(tgt_hit)
    bbox = (int(trows.max() - trows.min() + 1), int(tcols.max() - tcols.min() + 1))
    return src_kps, tgt_kps, bbox


def evaluate(model: Model, records, n_views=None, n_starts=12, steps=30,
             refine_lr=0.05, plateau=1e-5, synthetic_meta=None,
             pairs_per_video=8, keypoints_per_pair=10, tau=0.1,
             progress=None):
    """Pose accuracy, segmentation IoU, and (when the dataset carries
    synthetic ground truth) keypoint-transfer PCK over the given records.

    Returns a dict with one record per view, one per keypoint pair, and a
    summary whose averages are recomputed from the per-sample records.
    """
    flat = [(rec, s) for rec in records for s in rec.samples]
    if n_views is not None:
        flat = flat[:n_views]
    sample_rows = []
    for i, (rec, sample) in enumerate(flat):
        est = estimate_pose(model, sample.feature_map, sample.pose,
                            n_starts=n_starts, steps=steps, lr=refine_lr,
                            plateau=plateau)
        err = geodesic_error(est.matrix, sample.pose.matrix)
        pred = render_instance_mask(model, sample.feature_map, sample.pose,
                                    rotation=est.matrix)
        iou = instance_iou(pred > 0.5, sample.mask > 0)
        sample_rows.append({"video": rec.video_id, "frame": sample.frame_id,
                            "rotation_error_deg": round(err, 6),
                            "iou": round(iou, 6),
                            "score": round(est.score, 6)})
        if progress:
            progress(f"view {i + 1}/{len(flat)}: rot_err={err:.2f} iou={iou:.3f}")

    pair_rows = []
    if synthetic_meta is not None:
        for rec in records:
            n_pairs = 0
            for a in range(0, len(rec.samples) - 1, 2):
                if n_pairs >= pairs_per_video:
                    break
                src, tgt = rec.samples[a], rec.samples[a + 1]
                src_kps, tgt_kps, bbox = _correspondence_ground_truth(
                    synthetic_meta, rec, src, tgt, keypoints_per_pair)
                if not src_kps:
                    continue
                index = CorrespondenceIndex(model, src.feature_map,
                                            tgt.feature_map)
                hits = []
                for kp, gt in zip(src_kps, tgt_kps):
                    pred_px, _ = index.transfer(kp, mask=src.mask)
                    hits.append(pck_hit(pred_px, gt, bbox, tau))
                pair_rows.append({"video": rec.video_id,
                                  "src_frame": src.frame_id,
                                  "tgt_frame": tgt.frame_id,
                                  "keypoints": len(hits),
                                  "hits": int(np.sum(hits))})
                n_pairs += 1
                if progress:
                    progress(f"pair {rec.video_id} {src.frame_id}->{tgt.frame_id}: "
                             f"{int(np.sum(hits))}/{len(hits)} within threshold")

    errs = np.array([r["rotation_error_deg"] for r in sample_rows])
    ious = np.array([r["iou"] for r in sample_rows])
    total_kp = sum(r["keypoints"] for r in pair_rows)
    total_hit = sum(r["hits"] for r in pair_rows)
    summary = {
        "views": len(sample_rows),
        "acc30": round(float((errs <= 30.0).mean()), 6) if len(errs) else None,
        "acc10": round(float((errs <= 10.0).mean()), 6) if len(errs) else None,
        "median_rotation_error_deg": round(float(np.median(errs)), 6) if len(errs) else None,
        "mean_iou": round(float(ious.mean()), 6) if len(ious) else None,
        "keypoints": total_kp,
        "pck": round(total_hit / total_kp, 6) if total_kp else None,
    }
    return {"samples": sample_rows, "pairs": pair_rows, "summary": summary}
