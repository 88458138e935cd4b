"""Two-stage training.

Stage one fits only the template shape field with the geometric
objectives; stage two freezes the shape (configurable) and trains the
feature field, adapter, latent encoder, deformation field, and background
descriptor with the full weighted objective.

Mechanics: each sample gets its own tape (renders differ per view), and
quantities shared across the batch (template vertices, sampled vertex
features) live on one shared tape whose backward sweep is seeded with the
per-sample gradient sums. With every per-sample root seeded 1/N for an
N-sample optimizer step, accumulated micro-batches produce exactly the
gradient of the concatenated batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import Tape
from .data import DataError, split_holdout
from .fields import group_of
from . import losses as L
from .losses import LossWeights
from .model import Model, load_model, save_model
from .nets import AdamState, adam_step
from .render import rasterize, render_surface_prob
from .serialize import read_fields, write_fields
from .tetgrid import Mesh, edge_list


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 12
    grad_accum: int = 2
    epochs: int = 20
    holdout: float = 0.10
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    sdf_samples: int = 512
    sdf_noise: float = 0.05
    gamma: float = 1e-2
    soft_faces: int = 8
    patience: int = 5
    sdf_trainable_joint: bool = False
    pretrain_steps: int = 800
    pretrain_radius: float = 0.7
    pretrain_lr: float = 1e-2
    deterministic: bool = True
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch * self.grad_accum < 1:
            raise DataError("batch x accumulation must be >= 1")
        if not 0 < self.holdout < 1:
            raise DataError("holdout fraction must be in (0, 1)")


TEMPLATE_GROUPS = ("sdf.",)
JOINT_GROUPS = ("feat.", "deform.", "enc.", "adpt.", "beta")


def _rng_state_to_arrays(rng):
    st = rng.bit_generator.state
    s = st["state"]["state"]
    inc = st["state"]["inc"]
    words = [s & (2**64 - 1), s >> 64, inc & (2**64 - 1), inc >> 64,
             st["has_uint32"], st["uinteger"]]
    return np.array(words, dtype=np.uint64)


def _rng_from_arrays(arr):
    arr = [int(v) for v in arr]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": arr[0] | (arr[1] << 64), "inc": arr[2] | (arr[3] << 64)},
        "has_uint32": arr[4], "uinteger": arr[5],
    }
    return rng


@dataclass
class Checkpoint:
    """Everything needed to resume: parameters, optimizer moments, stage,
    epoch, RNG state, and the hold-out loss of the stored parameters."""

    model: Model
    adam: AdamState
    stage: str
    epoch: int
    rng_state: np.ndarray
    holdout_loss: float

    def save(self, path):
        fields = {}
        fields["train.stage"] = np.frombuffer(self.stage.encode(), np.uint8).copy()
        fields["train.epoch"] = np.int64(self.epoch)
        fields["train.holdout_loss"] = np.float64(self.holdout_loss)
        fields["train.rng"] = self.rng_state
        fields["opt.step"] = np.int64(self.adam.step)
        fields["opt.hyper"] = np.array([self.adam.lr, self.adam.beta1,
                                        self.adam.beta2, self.adam.eps])
        for name, arr in self.adam.m.items():
            fields[f"opt.m.{name}"] = arr
        for name, arr in self.adam.v.items():
            fields[f"opt.v.{name}"] = arr
        save_model(self.model, path)  # writes meta.* and param.*
        existing = read_fields(path)
        existing.update(fields)
        write_fields(path, existing)

    @classmethod
    def load(cls, path):
        model = load_model(path)
        f = read_fields(path)
        hyper = f["opt.hyper"]
        adam = AdamState(lr=float(hyper[0]), beta1=float(hyper[1]),
                         beta2=float(hyper[2]), eps=float(hyper[3]),
                         step=int(f["opt.step"]))
        for name, arr in f.items():
            if name.startswith("opt.m."):
                adam.m[name[len("opt.m."):]] = arr.copy()
            elif name.startswith("opt.v."):
                adam.v[name[len("opt.v."):]] = arr.copy()
        return cls(model, adam, bytes(f["train.stage"]).decode(),
                   int(f["train.epoch"]), f["train.rng"].copy(),
                   float(f["train.holdout_loss"]))


def _flat_samples(records):
    out = []
    for rec in records:
        for s in rec.samples:
            out.append((rec, s))
    return out


class Trainer:
    """Drives both stages over one category's records."""

    def __init__(self, records, config: TrainConfig, model: Model, log=None):
        if not records:
            raise DataError("empty dataset")
        self.config = config
        self.model = model
        self.log = log or (lambda event: None)
        self.train_recs, self.hold_recs = split_holdout(records, config.holdout)
        self.train_samples = _flat_samples(self.train_recs)
        self.hold_samples = _flat_samples(self.hold_recs)
        self.clouds = {rec.video_id: rec.points for rec in records}
        self.trees = {rec.video_id: cKDTree(rec.points) for rec in records}
        self.rng = np.random.default_rng(config.seed)
        self.adam = AdamState(lr=config.lr, beta1=config.adam_beta1,
                              beta2=config.adam_beta2, eps=config.adam_eps)
        self.dtype = next(iter(model.params.values())).dtype

    # -- shared building blocks -------------------------------------------------

    def _template_tape(self, groups):
        tape = Tape(dtype=self.dtype)
        bound = self.model.bind(tape, groups=groups)
        mesh, _ = self.model.template_mesh(tape, bound)
        if mesh.face_count == 0:
            raise DataError("template surface vanished: shape field has no "
                            "zero crossing inside the canonical cube")
        return tape, bound, mesh

    def _eikonal(self, bound, mesh_positions, rng):
        pts = L.sample_sdf_points(mesh_positions, self.config.sdf_samples,
                                  rng, self.config.sdf_noise).astype(self.dtype)
        return L.eikonal_loss(bound.sdf_with_grad(pts))

    def _sample_losses_template(self, mesh, rec, sample):
        """Per-sample geometric losses on an own tape."""
        t = Tape(dtype=self.dtype)
        verts = t.leaf(mesh.positions)
        smesh = replace(mesh, vertices=verts, features=None)
        render = rasterize(smesh, sample.pose, gamma=self.config.gamma,
                           soft_faces=self.config.soft_faces)
        parts = {
            "mask": L.mask_loss(render.mask, sample.mask / 255.0),
            "mask_dt": L.mask_dt_loss(render.mask, sample.dist),
            "chamfer": L.chamfer_loss(verts, self.clouds[rec.video_id],
                                      self.trees[rec.video_id]),
        }
        return t, verts, parts

    def _stage_template_batch(self, batch, seed_w, grad_buf, eik_w, rng):
        tape0, bound, mesh = self._template_tape(TEMPLATE_GROUPS)
        eik = self._eikonal(bound, mesh.positions, rng)
        vseed = np.zeros_like(mesh.positions)
        report = {"chamfer": 0.0, "mask": 0.0, "mask_dt": 0.0}
        w = self.config.weights
        for rec, sample in batch:
            t, verts, parts = self._sample_losses_template(mesh, rec, sample)
            parts["eikonal"] = t.leaf(np.zeros(()))  # shared term added on tape0
            loss = L.total_loss("template", parts, w)
            g = t.backward(seeds=[(loss, np.full((), seed_w, dtype=self.dtype))])
            vseed += g.of(verts)
            for k in report:
                report[k] += float(parts[k].v)
        g0 = tape0.backward(seeds=[(mesh.vertices, vseed),
                                   (eik, np.full((), eik_w, dtype=self.dtype))])
        for name, grad in bound.grads(g0).items():
            grad_buf[name] = grad_buf.get(name, 0) + grad
        report = {k: v / len(batch) for k, v in report.items()}
        report["eikonal"] = float(eik.v)
        return report

    # -- joint stage --------------------------------------------------------------

    def _joint_static_mesh(self):
        """Frozen template geometry reused across the joint stage."""
        tape, _, mesh = self._template_tape(("sdf.",))
        verts = mesh.positions.copy()
        faces = mesh.faces
        edges = edge_list(faces)
        sample_ids = L.farthest_point_sample(
            verts, min(self.model.vertex_samples, len(verts)))
        return verts, faces, edges, sample_ids

    def _stage_joint_batch(self, batch, seed_w, grad_buf, static, rng,
                           eik_value):
        verts, faces, edges, sample_ids = static
        w = self.model.temperature
        cw = self.config.weights
        tape0 = Tape(dtype=self.dtype)
        bound0 = self.model.bind(tape0, groups=("feat.",))
        f_sampled = bound0.vertex_features(verts[sample_ids].astype(self.dtype))
        fseed = np.zeros_like(f_sampled.v)
        report = {k: 0.0 for k in ("chamfer", "mask", "mask_dt", "deform",
                                   "deform_smooth", "appearance")}
        for rec, sample in batch:
            t = Tape(dtype=self.dtype)
            bound = self.model.bind(t, groups=("deform.", "enc.", "adpt.", "beta"))
            latent = bound.encode_latent(sample.feature_map.astype(self.dtype))
            v_def = bound.deform(verts.astype(self.dtype), latent)
            mesh = Mesh(v_def, faces, np.zeros((len(verts), 2), np.int64),
                        np.zeros(len(verts)))
            render = rasterize(mesh, sample.pose, gamma=self.config.gamma,
                               soft_faces=self.config.soft_faces)
            adapted = bound.adapt_features(sample.feature_map.astype(self.dtype))
            d, ah, aw = adapted.shape
            if (ah, aw) == (sample.pose.height, sample.pose.width):
                app_render = render
            else:
                app_pose = replace_pose_resolution(sample.pose, ah, aw)
                app_render = rasterize(mesh, app_pose, with_soft_mask=False)
            sigma = L.compute_sigma(v_def.v, sample_ids)
            p_hat = render_surface_prob(app_render, v_def.v, sample_ids, sigma)
            f_leaf = t.leaf(f_sampled.v)
            pixel_feats = adapted.reshape(d, ah * aw).transpose(1, 0)
            parts = {
                "mask": L.mask_loss(render.mask, sample.mask / 255.0),
                "mask_dt": L.mask_dt_loss(render.mask, sample.dist),
                "chamfer": L.chamfer_loss(v_def, self.clouds[rec.video_id],
                                          self.trees[rec.video_id]),
                "deform": L.deform_loss(verts, v_def),
                "deform_smooth": L.deform_smooth_loss(edges, verts, v_def),
                "appearance": L.appearance_loss(pixel_feats, p_hat, f_leaf,
                                                bound.background(), w),
                "eikonal": t.leaf(np.asarray(eik_value, dtype=self.dtype)),
            }
            loss = L.total_loss("joint", parts, cw)
            g = t.backward(seeds=[(loss, np.full((), seed_w, dtype=self.dtype))])
            fseed += g.of(f_leaf)
            for name, grad in bound.grads(g).items():
                grad_buf[name] = grad_buf.get(name, 0) + grad
            for k in report:
                report[k] += float(parts[k].v)
        g0 = tape0.backward(seeds=[(f_sampled, fseed)])
        for name, grad in bound0.grads(g0).items():
            grad_buf[name] = grad_buf.get(name, 0) + grad
        return {k: v / len(batch) for k, v in report.items()}

    # -- evaluation ----------------------------------------------------------------

    def holdout_loss(self, stage, static=None, epoch=0):
        """Stage objective averaged over the hold-out samples (no grads)."""
        rng = np.random.default_rng([self.config.seed, 7001, epoch])
        w = self.config.weights
        if stage == "template":
            tape0, bound, mesh = self._template_tape(TEMPLATE_GROUPS)
            eik = float(self._eikonal(bound, mesh.positions, rng).v)
            total = 0.0
            for rec, sample in self.hold_samples:
                t, verts, parts = self._sample_losses_template(mesh, rec, sample)
                parts["eikonal"] = t.leaf(np.asarray(eik, dtype=self.dtype))
                total += float(L.total_loss("template", parts, w).v)
            return total / len(self.hold_samples)
        static = static or self._joint_static_mesh()
        eik_value = self._joint_eik_value(static, rng)
        total = 0.0
        for rec, sample in self.hold_samples:
            parts = self.joint_parts_no_grad(rec, sample, static, eik_value)
            total += float(parts["total"])
        return total / len(self.hold_samples)

    def _joint_eik_value(self, static, rng):
        tape = Tape(dtype=self.dtype)
        bound = self.model.bind(tape, groups=("sdf.",))
        return float(self._eikonal(bound, static[0], rng).v)

    def holdout_parts(self, static=None, epoch=0):
        """Mean per-objective values over the hold-out samples (joint set)."""
        static = static or self._joint_static_mesh()
        rng = np.random.default_rng([self.config.seed, 7001, epoch])
        eik_value = self._joint_eik_value(static, rng)
        sums = {}
        for rec, sample in self.hold_samples:
            parts = self.joint_parts_no_grad(rec, sample, static, eik_value)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        return {k: v / len(self.hold_samples) for k, v in sums.items()}

    def joint_parts_no_grad(self, rec, sample, static, eik_value):
        verts, faces, edges, sample_ids = static
        t = Tape(dtype=self.dtype)
        bound = self.model.bind(t)
        latent = bound.encode_latent(sample.feature_map.astype(self.dtype))
        v_def = bound.deform(verts.astype(self.dtype), latent)
        mesh = Mesh(v_def, faces, np.zeros((len(verts), 2), np.int64),
                    np.zeros(len(verts)))
        render = rasterize(mesh, sample.pose, gamma=self.config.gamma,
                           soft_faces=self.config.soft_faces)
        adapted = bound.adapt_features(sample.feature_map.astype(self.dtype))
        d, ah, aw = adapted.shape
        if (ah, aw) == (sample.pose.height, sample.pose.width):
            app_render = render
        else:
            app_render = rasterize(mesh, replace_pose_resolution(sample.pose, ah, aw),
                                   with_soft_mask=False)
        sigma = L.compute_sigma(v_def.v, sample_ids)
        p_hat = render_surface_prob(app_render, v_def.v, sample_ids, sigma)
        f_sampled = bound.vertex_features(verts[sample_ids].astype(self.dtype))
        pixel_feats = adapted.reshape(d, ah * aw).transpose(1, 0)
        parts = {
            "mask": L.mask_loss(render.mask, sample.mask / 255.0),
            "mask_dt": L.mask_dt_loss(render.mask, sample.dist),
            "chamfer": L.chamfer_loss(v_def, self.clouds[rec.video_id],
                                      self.trees[rec.video_id]),
            "deform": L.deform_loss(verts, v_def),
            "deform_smooth": L.deform_smooth_loss(edges, verts, v_def),
            "appearance": L.appearance_loss(pixel_feats, p_hat, f_sampled,
                                            bound.background(),
                                            self.model.temperature),
            "eikonal": t.leaf(np.asarray(eik_value, dtype=self.dtype)),
        }
        out = {k: float(v.v) for k, v in parts.items()}
        out["total"] = float(L.total_loss("joint", parts, self.config.weights).v)
        return out

    # -- epoch loops -----------------------------------------------------------------

    def _epoch_groups(self):
        order = self.rng.permutation(len(self.train_samples))
        bs = self.config.batch
        micro = [order[i:i + bs] for i in range(0, len(order), bs)]
        ga = self.config.grad_accum
        return [micro[i:i + ga] for i in range(0, len(micro), ga)]

    def run_stage(self, stage, epochs=None, start_epoch=0):
        cfg = self.config
        epochs = cfg.epochs if epochs is None else epochs
        trainable = TEMPLATE_GROUPS if stage == "template" else (
            JOINT_GROUPS + (("sdf.",) if cfg.sdf_trainable_joint else ()))
        static = None
        if stage == "joint" and not cfg.sdf_trainable_joint:
            static = self._joint_static_mesh()
        best = None
        bad_epochs = 0
        for epoch in range(start_epoch, start_epoch + epochs):
            t_start = time.time()
            for group in self._epoch_groups():
                n_total = sum(len(m) for m in group)
                grad_buf = {}
                report = None
                for mids in group:
                    batch = [self.train_samples[i] for i in mids]
                    seed_w = 1.0 / n_total
                    if stage == "template":
                        report = self._stage_template_batch(
                            batch, seed_w, grad_buf,
                            eik_w=cfg.weights.eikonal * len(mids) / n_total,
                            rng=self.rng)
                    else:
                        eik_value = self._joint_eik_value(static, self.rng)
                        report = self._stage_joint_batch(
                            batch, seed_w, grad_buf, static, self.rng, eik_value)
                grads = {n: g for n, g in grad_buf.items()
                         if group_of(n) in trainable}
                adam_step(self.adam, self.model.params, grads)
            hold = self.holdout_loss(stage, static=static, epoch=epoch)
            event = {"stage": stage, "epoch": epoch, "holdout": hold,
                     "seconds": round(time.time() - t_start, 2)}
            if report:
                event.update({k: round(v, 6) for k, v in report.items()})
            self.log(event)
            if best is None or hold < best.holdout_loss:
                best = Checkpoint(
                    Model(self.model.spec,
                          {k: v.copy() for k, v in self.model.params.items()},
                          self.model.grid_resolution, self.model.temperature,
                          self.model.vertex_samples, self.model.init_seed),
                    AdamState(self.adam.lr, self.adam.beta1, self.adam.beta2,
                              self.adam.eps, self.adam.step,
                              {k: v.copy() for k, v in self.adam.m.items()},
                              {k: v.copy() for k, v in self.adam.v.items()}),
                    stage, epoch, _rng_state_to_arrays(self.rng), hold)
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    break
        # training continues from the best parameters, not the last
        self.model.params = {k: v.copy() for k, v in best.model.params.items()}
        return best


def replace_pose_resolution(pose, h, w):
    """Same camera at a different raster resolution (intrinsics rescale)."""
    sy = h / pose.height
    sx = w / pose.width
    from .camera import CameraPose
    out = CameraPose(pose.rotation.copy(), pose.translation.copy(),
                     pose.fx * sx, pose.fy * sy, pose.cx * sx, pose.cy * sy,
                     h, w)
    out._matrix = pose.matrix
    return out


def train_template(records, config: TrainConfig, model: Model, log=None,
                   pretrain=True) -> Checkpoint:
    """Stage one: fit the template shape field only."""
    trainer = Trainer(records, config, model, log=log)
    if pretrain:
        from .model import pretrain_template_sphere
        pretrain_template_sphere(model, radius=config.pretrain_radius,
                                 steps=config.pretrain_steps,
                                 lr=config.pretrain_lr, seed=config.seed)
    return trainer.run_stage("template")


def train_joint(records, config: TrainConfig, ckpt: Checkpoint, log=None) -> Checkpoint:
    """Stage two: appearance and deformation on top of a stage-one
    checkpoint; the shape field stays frozen unless configured otherwise."""
    trainer = Trainer(records, config, ckpt.model, log=log)
    trainer.rng = _rng_from_arrays(ckpt.rng_state)
    return trainer.run_stage("joint")
