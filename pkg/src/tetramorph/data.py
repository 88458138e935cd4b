"""Dataset ingestion, canonicalization, and the synthetic-category
generator.

On-disk layout, one directory per category::

    <category>/<video>/frame_00000.feat      feature map, CF3D binary
    <category>/<video>/frame_00000.mask.pgm  binary object mask (P5, 0/255)
    <category>/<video>/frame_00000.dt.f32    mask distance transform, f32 raw
    <category>/<video>/frame_00000.pose.txt  camera: R row-major + t; fx fy cx cy
    <category>/<video>/points.xyz            instance point cloud, canonical

Feature maps are stored pre-adapter (the backbone runs offline, once), so
the engine needs no ML framework at train time. The synthetic generator
ray-casts analytic shapes for masks and renders a fixed random smooth
feature field for the feature maps, giving perfectly learnable
correspondences for end-to-end verification.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .camera import CameraPose, random_rotations

FEAT_MAGIC = b"CF3D"
FEAT_VERSION = 1


class DataError(Exception):
    """Raised on missing, corrupt, or invariant-violating dataset files."""


# -- binary formats ---------------------------------------------------------------

def write_feature_map(path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 3:
        raise DataError(f"{path}: feature map must be CxHxW")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<IIII", FEAT_VERSION, c, h, w))
        fh.write(arr.tobytes())


def read_feature_map(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: cannot read feature map ({e})") from e
    if raw[:4] != FEAT_MAGIC:
        raise DataError(f"{path}: bad feature-map magic")
    ver, c, h, w = struct.unpack("<IIII", raw[4:20])
    if ver != FEAT_VERSION:
        raise DataError(f"{path}: unsupported feature-map version {ver}")
    payload = raw[20:]
    if len(payload) != 4 * c * h * w:
        raise DataError(f"{path}: feature-map payload does not match header dims")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)


def write_mask_pgm(path, mask):
    mask = np.asarray(mask)
    data = np.where(mask > 0, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_mask_pgm(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: cannot read mask ({e})") from e
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: mask must be binary PGM (P5)")
    # header: magic, dims, maxval; comments not supported by this writer
    parts = raw.split(b"\n", 3)
    if len(parts) < 4:
        raise DataError(f"{path}: truncated PGM header")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError as e:
        raise DataError(f"{path}: malformed PGM header") from e
    if maxval != 255:
        raise DataError(f"{path}: mask maxval must be 255")
    data = parts[3][: h * w]
    if len(data) != h * w:
        raise DataError(f"{path}: mask payload does not match dims")
    mask = np.frombuffer(data, dtype=np.uint8).reshape(h, w)
    if not np.isin(mask, (0, 255)).all():
        raise DataError(f"{path}: mask values must be 0 or 255")
    return mask.copy()


def write_dt_f32(path, dt):
    np.ascontiguousarray(dt, dtype="<f4").tofile(path)


def read_dt_f32(path, h, w):
    path = Path(path)
    try:
        raw = np.fromfile(path, dtype="<f4")
    except OSError as e:
        raise DataError(f"{path}: cannot read distance transform ({e})") from e
    if raw.size != h * w:
        raise DataError(f"{path}: distance transform size != mask dims")
    return raw.reshape(h, w).astype(np.float32)


def write_pose_txt(path, pose: CameraPose):
    R = pose.matrix
    vals = list(R.reshape(-1)) + list(pose.translation)
    with open(path, "w") as fh:
        fh.write(" ".join(f"{v:.17g}" for v in vals) + "\n")
        fh.write(f"{pose.fx:.17g} {pose.fy:.17g} {pose.cx:.17g} {pose.cy:.17g}\n")


def read_pose_txt(path, h, w) -> CameraPose:
    path = Path(path)
    try:
        lines = path.read_text().strip().splitlines()
    except OSError as e:
        raise DataError(f"{path}: cannot read pose ({e})") from e
    if len(lines) < 2:
        raise DataError(f"{path}: pose file needs extrinsics and intrinsics lines")
    try:
        ext = [float(v) for v in lines[0].split()]
        intr = [float(v) for v in lines[1].split()]
    except ValueError as e:
        raise DataError(f"{path}: non-numeric pose entry") from e
    if len(ext) != 12 or len(intr) != 4:
        raise DataError(f"{path}: pose needs 12 extrinsic + 4 intrinsic floats")
    R = np.array(ext[:9]).reshape(3, 3)
    if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-5:
        raise DataError(f"{path}: rotation is not orthonormal")
    return CameraPose.from_matrix(R, np.array(ext[9:]), intr[0], intr[1],
                                  intr[2], intr[3], h, w)


def write_points_xyz(path, pts):
    with open(path, "w") as fh:
        for p in np.asarray(pts, dtype=np.float64):
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def read_points_xyz(path):
    path = Path(path)
    try:
        rows = [ln.split() for ln in path.read_text().strip().splitlines() if ln.strip()]
    except OSError as e:
        raise DataError(f"{path}: cannot read point cloud ({e})") from e
    try:
        pts = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
    except ValueError as e:
        raise DataError(f"{path}: non-numeric point entry") from e
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"{path}: points must be three columns")
    return pts


# -- records ------------------------------------------------------------------------

@dataclass
class TrainingSample:
    feature_map: np.ndarray   # (C, H, W) float32, pre-adapter
    mask: np.ndarray          # (H, W) uint8, 0/255
    dist: np.ndarray          # (H, W) float32, pixels, zero outside mask
    pose: CameraPose
    video_id: str
    frame_id: int


@dataclass
class VideoRecord:
    video_id: str
    points: np.ndarray        # (M, 3) canonical instance cloud
    samples: list = field(default_factory=list)


# -- canonicalization ------------------------------------------------------------------

def canonicalize(points, poses):
    """Map a cloud to the canonical frame and adjust cameras so projections
    are unchanged.

    The bounding-box center goes to the origin and one uniform scale maps
    the widest axis range to exactly [-1, 1]; each camera translation
    becomes s (t + R c). Returns (points', poses', center, scale).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise DataError("cannot canonicalize an empty point cloud")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = hi - lo
    if extent.max() <= 0:
        raise DataError("cannot canonicalize a zero-extent point cloud")
    center = (lo + hi) / 2.0
    scale = 2.0 / extent.max()
    out_pts = (pts - center) * scale
    out_poses = []
    for p in poses:
        R = p.matrix
        t = scale * (p.translation + R @ center)
        out_poses.append(CameraPose.from_matrix(R, t, p.fx, p.fy,
                                                p.cx, p.cy, p.height, p.width))
    return out_pts, out_poses, center, scale


# -- analytic shapes --------------------------------------------------------------------

@dataclass
class AnalyticShape:
    """Axis-aligned analytic surface in the canonical frame: an ellipsoid
    or a rounded box, both star-shaped around their center."""

    kind: str                 # "ellipsoid" | "box"
    center: np.ndarray
    axes: np.ndarray          # semi-axes / half-extents
    rounding: float = 0.0     # corner radius for boxes

    def sdf(self, pts):
        p = np.asarray(pts, dtype=np.float64) - self.center
        if self.kind == "ellipsoid":
            # scaled-space distance: exact at the surface, monotone elsewhere
            k0 = np.linalg.norm(p / self.axes, axis=-1)
            k1 = np.linalg.norm(p / (self.axes ** 2), axis=-1)
            return np.where(k1 > 0, k0 * (k0 - 1.0) / np.maximum(k1, 1e-12),
                            -self.axes.min())
        q = np.abs(p) - (self.axes - self.rounding)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside - self.rounding

    def ray_hits(self, origin, dirs):
        """First intersections of rays origin + t*dir, t > 0.

        Ellipsoids solve the quadric; boxes sphere-trace the SDF. Returns
        (hit mask, points)."""
        d = np.asarray(dirs, dtype=np.float64)
        o = np.broadcast_to(np.asarray(origin, dtype=np.float64), d.shape)
        if self.kind == "ellipsoid":
            oc = (o - self.center) / self.axes
            dc = d / self.axes
            a = (dc * dc).sum(-1)
            b = 2.0 * (oc * dc).sum(-1)
            c = (oc * oc).sum(-1) - 1.0
            disc = b * b - 4 * a * c
            hit = disc >= 0
            sq = np.sqrt(np.maximum(disc, 0.0))
            t0 = (-b - sq) / (2 * a)
            t1 = (-b + sq) / (2 * a)
            t = np.where(t0 > 1e-9, t0, t1)
            hit &= t > 1e-9
            return hit, o + t[..., None] * d
        t = np.zeros(d.shape[:-1])
        alive = np.ones(d.shape[:-1], dtype=bool)
        for _ in range(96):
            p = o + t[..., None] * d
            s = self.sdf(p)
            t = np.where(alive, t + s, t)
            alive = alive & (s > 1e-7) & (t < 12.0)
        p = o + t[..., None] * d
        hit = np.abs(self.sdf(p)) < 1e-4
        return hit, p

    def surface_points(self, n, rng):
        """Quasi-uniform surface samples by radial projection from the
        center along uniform directions."""
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        if self.kind == "ellipsoid":
            return self.center + d * self.axes
        lo = np.zeros(n)
        hi = np.full(n, float(np.linalg.norm(self.axes)) + 1.0)
        for _ in range(60):
            mid = (lo + hi) / 2
            inside = self.sdf(self.center + mid[:, None] * d) < 0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        return self.center + ((lo + hi) / 2)[:, None] * d


class SmoothFeatureField:
    """Fixed random smooth unit-vector field over canonical positions:
    random Fourier features mixed into the output dimension. Fully
    determined by its seed."""

    def __init__(self, dim=128, seed=0, freq=2.0, basis=64):
        rng = np.random.default_rng([seed, 7_771_111])
        self.freqs = rng.normal(0.0, freq, size=(basis, 3))
        self.phases = rng.uniform(0, 2 * np.pi, size=basis)
        self.mix = rng.normal(size=(dim, basis)) / math.sqrt(basis)
        self.background = rng.normal(size=dim)
        self.background /= np.linalg.norm(self.background)
        self.dim = dim

    def __call__(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        z = np.cos(pts @ self.freqs.T + self.phases)
        f = z @ self.mix.T
        return f / np.maximum(np.linalg.norm(f, axis=-1, keepdims=True), 1e-12)


# -- synthetic generation ----------------------------------------------------------------

FAMILIES = ("sphere", "ellipsoid", "box")


@dataclass
class SyntheticSpec:
    family: str = "ellipsoid"
    n_videos: int = 10
    frames: int = 20
    seed: int = 0
    image_size: int = 64
    feat_size: int = 32
    feature_dim: int = 128
    camera_distance: float = 3.0
    focal: float = 56.0
    cloud_points: int = 2048
    feature_freq: float = 2.0
    axis_low: float = 0.5
    axis_high: float = 1.0


def _instance_shape(spec: SyntheticSpec, rng) -> AnalyticShape:
    if spec.family == "sphere":
        return AnalyticShape("ellipsoid", np.zeros(3), np.full(3, 1.0))
    if spec.family == "ellipsoid":
        axes = np.sort(rng.uniform(spec.axis_low, spec.axis_high, size=3))[::-1]
        return AnalyticShape("ellipsoid", np.zeros(3), axes / axes.max())
    if spec.family == "box":
        half = np.sort(rng.uniform(spec.axis_low, spec.axis_high, size=3))[::-1]
        half = half / half.max()
        return AnalyticShape("box", np.zeros(3), half, rounding=0.15 * half.min())
    raise DataError(f"unknown synthetic family {spec.family!r}; "
                    f"expected one of {FAMILIES}")


def _pixel_rays(h, w, fx, fy, cx, cy):
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d = np.stack([(cols + 0.5 - cx) / fx, (rows + 0.5 - cy) / fy,
                  np.ones_like(rows, dtype=np.float64)], axis=-1)
    return d.reshape(-1, 3)


def _render_analytic(shape: AnalyticShape, R, t, h, w, fx, fy, cx, cy):
    """Exact mask and canonical-frame hit points through pixel centers."""
    dirs_cam = _pixel_rays(h, w, fx, fy, cx, cy)
    dirs_can = dirs_cam @ R  # R^T applied to each camera ray
    origin_can = -R.T @ t
    hit, pts = shape.ray_hits(origin_can, dirs_can)
    return hit.reshape(h, w), pts.reshape(h, w, 3)


def mask_distance_transform(mask):
    """Exact Euclidean distance (pixels) to the silhouette inside the mask,
    zero outside."""
    inside = np.asarray(mask) > 0
    return ndimage.distance_transform_edt(inside).astype(np.float32)


def gen_synthetic(out_dir, spec: SyntheticSpec):
    """Write a synthetic category dataset; returns the in-memory records.

    Deterministic in the seed: file payloads are bit-identical across
    runs. The instance cloud is canonicalized with the same rule the
    loader validates, and masks/features are ray-cast from the
    identically-transformed analytic shape, so every dataset invariant
    holds exactly.
    """
    spec = spec if isinstance(spec, SyntheticSpec) else SyntheticSpec(**spec)
    if spec.family not in FAMILIES:
        raise DataError(f"unknown synthetic family {spec.family!r}; "
                        f"expected one of {FAMILIES}")
    out = Path(out_dir) / spec.family
    out.mkdir(parents=True, exist_ok=True)
    gt_field = SmoothFeatureField(spec.feature_dim, spec.seed, spec.feature_freq)
    records = []
    meta = {"family": spec.family, "seed": spec.seed,
            "image_size": spec.image_size, "feat_size": spec.feat_size,
            "feature_dim": spec.feature_dim, "feature_freq": spec.feature_freq,
            "camera_distance": spec.camera_distance, "focal": spec.focal,
            "videos": {}}
    h = w = spec.image_size
    fh = fw = spec.feat_size
    f_scale = spec.feat_size / spec.image_size
    for v in range(spec.n_videos):
        rng = np.random.default_rng([spec.seed, v])
        vid = f"video_{v:03d}"
        vdir = out / vid
        vdir.mkdir(exist_ok=True)
        shape0 = _instance_shape(spec, rng)
        cloud0 = shape0.surface_points(spec.cloud_points, rng)
        rotations = random_rotations(rng, spec.frames)
        t_cam = np.array([0.0, 0.0, spec.camera_distance])
        poses0 = [CameraPose.from_matrix(R, t_cam, spec.focal, spec.focal,
                                         w / 2.0, h / 2.0, h, w)
                  for R in rotations]
        cloud, poses, center, scale = canonicalize(cloud0, poses0)
        shape = AnalyticShape(shape0.kind, (shape0.center - center) * scale,
                              shape0.axes * scale, shape0.rounding * scale)

        write_points_xyz(vdir / "points.xyz", cloud)
        rec = VideoRecord(vid, cloud)
        for fidx, pose in enumerate(poses):
            R = pose.matrix
            t = pose.translation
            mask_hit, _ = _render_analytic(shape, R, t, h, w,
                                           pose.fx, pose.fy, pose.cx, pose.cy)
            mask = np.where(mask_hit, 255, 0).astype(np.uint8)
            dt = mask_distance_transform(mask)
            feat_hit, feat_pts = _render_analytic(
                shape, R, t, fh, fw,
                pose.fx * f_scale, pose.fy * f_scale,
                pose.cx * f_scale, pose.cy * f_scale)
            fmap = np.broadcast_to(gt_field.background,
                                   (fh * fw, spec.feature_dim)).copy()
            flat_hit = feat_hit.reshape(-1)
            if flat_hit.any():
                fmap[flat_hit] = gt_field(feat_pts.reshape(-1, 3)[flat_hit])
            fmap = fmap.reshape(fh, fw, spec.feature_dim).transpose(2, 0, 1)
            fmap = fmap.astype(np.float32)

            stem = vdir / f"frame_{fidx:05d}"
            write_feature_map(f"{stem}.feat", fmap)
            write_mask_pgm(f"{stem}.mask.pgm", mask)
            write_dt_f32(f"{stem}.dt.f32", dt)
            write_pose_txt(f"{stem}.pose.txt", pose)
            rec.samples.append(TrainingSample(fmap, mask, dt, pose, vid, fidx))
        records.append(rec)
        meta["videos"][vid] = {"kind": shape.kind,
                               "center": shape.center.tolist(),
                               "axes": shape.axes.tolist(),
                               "rounding": shape.rounding}
    with open(out / "synthetic_meta.json", "w") as fh_meta:
        json.dump(meta, fh_meta, indent=1, sort_keys=True)
    return out, records


def load_synthetic_meta(category_dir):
    path = Path(category_dir) / "synthetic_meta.json"
    if not path.exists():
        return None
    with open(path) as fh:
        return json.load(fh)


def shape_from_meta(meta, video_id) -> AnalyticShape:
    v = meta["videos"][video_id]
    return AnalyticShape(v["kind"], np.array(v["center"]), np.array(v["axes"]),
                         v["rounding"])


# -- loading -------------------------------------------------------------------------

def _validate_sample(sample: TrainingSample, stem):
    mask_zero = sample.mask == 0
    dt = sample.dist
    if np.any(dt < 0):
        raise DataError(f"{stem}: negative distance-transform values")
    if np.any((dt == 0) != mask_zero):
        raise DataError(f"{stem}: distance transform must be zero exactly "
                        "outside the mask")
    if sample.mask.shape != dt.shape:
        raise DataError(f"{stem}: mask and distance transform dims differ")


def _validate_cloud(points, vdir):
    if points.shape[0] == 0:
        raise DataError(f"{vdir}: empty point cloud")
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    if lo.min() < -1.0 - 1e-5 or hi.max() > 1.0 + 1e-5:
        raise DataError(f"{vdir}: point cloud exceeds the canonical cube")
    widest = (hi - lo).max()
    if abs(widest - 2.0) > 1e-4:
        raise DataError(f"{vdir}: widest point-cloud axis must span exactly "
                        f"[-1, 1], got extent {widest:.6f}")


def load_dataset(category_dir):
    """Load every video of one category directory, validating all
    invariants; raises DataError naming the offending path."""
    root = Path(category_dir)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    video_dirs = sorted(p for p in root.iterdir()
                        if p.is_dir() and (p / "points.xyz").exists())
    if not video_dirs:
        raise DataError(f"{root}: no video directories with points.xyz found "
                        "(expected <category>/<video>/points.xyz)")
    records = []
    for vdir in video_dirs:
        points = read_points_xyz(vdir / "points.xyz")
        _validate_cloud(points, vdir)
        rec = VideoRecord(vdir.name, points)
        frames = sorted(vdir.glob("frame_*.feat"))
        if not frames:
            raise DataError(f"{vdir}: no frames found")
        for fpath in frames:
            stem = str(fpath)[: -len(".feat")]
            frame_id = int(fpath.name[len("frame_"):-len(".feat")])
            fmap = read_feature_map(fpath)
            mask = read_mask_pgm(f"{stem}.mask.pgm")
            dt = read_dt_f32(f"{stem}.dt.f32", *mask.shape)
            pose = read_pose_txt(f"{stem}.pose.txt", *mask.shape)
            sample = TrainingSample(fmap, mask, dt, pose, vdir.name, frame_id)
            _validate_sample(sample, stem)
            rec.samples.append(sample)
        records.append(rec)
    return records


def split_holdout(records, fraction=0.10):
    """Stable hash-ordered split at video granularity; returns
    (train, holdout). The holdout is the first ceil(fraction * n) videos
    by md5 of their id, so the split never depends on load order."""
    if not 0 < fraction < 1:
        raise DataError("holdout fraction must be in (0, 1)")
    ordered = sorted(records,
                     key=lambda r: hashlib.md5(r.video_id.encode()).hexdigest())
    n_hold = max(1, math.ceil(fraction * len(records)))
    if n_hold >= len(records):
        raise DataError("holdout split would consume every video")
    hold = ordered[:n_hold]
    hold_ids = {r.video_id for r in hold}
    train = [r for r in records if r.video_id not in hold_ids]
    hold_sorted = [r for r in records if r.video_id in hold_ids]
    return train, hold_sorted
