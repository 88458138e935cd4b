"""Dataset export: posed video frames -> tetramorph training layout.

Input layout, one directory per video under the frames root::

    <video>/annotations.json
    <video>/<images and masks referenced by the json>

``annotations.json`` carries the instance point cloud path and one entry
per frame: image path, mask path, a 3x3 rotation, a translation, and
pinhole intrinsics given at the original image resolution. Cameras follow
the world-to-camera convention ``X_cam = R X + t``; set ``"convention":
"row_major_transposed"`` for sources whose rotations act on row vectors.

The exporter resizes frames to the backbone input, rescales intrinsics
accordingly, binarizes masks, computes exact Euclidean distance
transforms, canonicalizes the cloud (bounding-box center to the origin,
widest axis to exactly [-1, 1]) with the matching camera adjustment
``t' = s (t + R c)``, and writes everything plus a manifest of skipped
frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import formats
from .backbone import INPUT_SIZE, FrozenBackbone


class ExportError(Exception):
    pass


@dataclass
class ExportJob:
    frames_dir: str        # root holding one directory per video
    out_dir: str           # dataset root to create
    backbone: str = "small"
    category: str = "exported"
    weights: str = None    # local checkpoint / hub id; random init when absent
    strict: bool = False   # deterministic kernels, single thread
    seed: int = 0
    layers: int = 12       # transformer depth (reduced only for smoke tests)


def _load_annotations(video_dir: Path):
    path = video_dir / "annotations.json"
    if not path.exists():
        raise ExportError(f"{video_dir}: missing annotations.json")
    with open(path) as fh:
        return json.load(fh)


def _frame_camera(entry, orig_w, orig_h):
    """Rotation/translation/intrinsics in the consumer convention, with
    intrinsics rescaled to the backbone input resolution."""
    R = np.asarray(entry["rotation"], dtype=np.float64)
    t = np.asarray(entry["translation"], dtype=np.float64)
    if entry.get("convention") == "row_major_transposed":
        R = R.T
    if R.shape != (3, 3) or np.max(np.abs(R.T @ R - np.eye(3))) > 1e-4:
        raise ExportError("rotation is not orthonormal")
    sx = INPUT_SIZE / orig_w
    sy = INPUT_SIZE / orig_h
    fx = float(entry["fx"]) * sx
    fy = float(entry["fy"]) * sy
    cx = float(entry["cx"]) * sx
    cy = float(entry["cy"]) * sy
    return R, t, (fx, fy, cx, cy)


def canonicalize(points, cameras):
    """The consumer's canonical-frame rule: bounding-box center to the
    origin, one uniform scale mapping the widest axis to exactly [-1, 1],
    cameras adjusted so projections are unchanged."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise ExportError("empty point cloud")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if (hi - lo).max() <= 0:
        raise ExportError("zero-extent point cloud")
    center = (lo + hi) / 2.0
    scale = 2.0 / (hi - lo).max()
    out_pts = (pts - center) * scale
    out_cams = [(R, scale * (t + R @ center), intr) for R, t, intr in cameras]
    return out_pts, out_cams


def export(job: ExportJob):
    """Run the job; returns (category_dir, manifest dict)."""
    frames_root = Path(job.frames_dir)
    if not frames_root.is_dir():
        raise ExportError(f"{frames_root}: not a directory")
    video_dirs = sorted(p for p in frames_root.iterdir() if p.is_dir())
    if not video_dirs:
        raise ExportError(f"{frames_root}: no video directories")
    backbone = FrozenBackbone(job.backbone, weights=job.weights,
                              strict=job.strict, seed=job.seed,
                              layers=job.layers)
    cat_dir = Path(job.out_dir) / job.category
    cat_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"backbone": job.backbone, "channels": backbone.channels,
                "exported_frames": 0, "skipped": []}

    def skip(video, frame, reason):
        manifest["skipped"].append({"video": video, "frame": frame,
                                    "reason": reason})

    for vdir in video_dirs:
        try:
            ann = _load_annotations(vdir)
        except ExportError as e:
            skip(vdir.name, None, str(e))
            continue
        points_path = vdir / ann.get("points", "points.xyz")
        if not points_path.exists():
            skip(vdir.name, None, f"missing point cloud {points_path.name}")
            continue
        points = np.loadtxt(points_path, dtype=np.float64).reshape(-1, 3)

        frames = []
        for idx, entry in enumerate(ann.get("frames", [])):
            if not all(k in entry for k in
                       ("image", "mask", "rotation", "translation",
                        "fx", "fy", "cx", "cy")):
                skip(vdir.name, idx, "missing camera annotation")
                continue
            img_path = vdir / entry["image"]
            mask_path = vdir / entry["mask"]
            if not img_path.exists() or not mask_path.exists():
                skip(vdir.name, idx, "missing image or mask file")
                continue
            img = Image.open(img_path)
            mask_img = Image.open(mask_path).convert("L").resize(
                (INPUT_SIZE, INPUT_SIZE), Image.NEAREST)
            mask = (np.asarray(mask_img) > 127).astype(np.uint8) * 255
            if not mask.any():
                skip(vdir.name, idx, "all-background mask")
                continue
            try:
                cam = _frame_camera(entry, img.width, img.height)
            except ExportError as e:
                skip(vdir.name, idx, str(e))
                continue
            frames.append((idx, img, mask, cam))

        if not frames:
            skip(vdir.name, None, "no usable frames")
            continue

        points_c, cams_c = canonicalize(points, [f[3] for f in frames])
        out_v = cat_dir / vdir.name
        out_v.mkdir(exist_ok=True)
        formats.write_points_xyz(out_v / "points.xyz", points_c)
        for (idx, img, mask, _), (R, t, intr) in zip(frames, cams_c):
            fmap = backbone.features(img)
            dt = ndimage.distance_transform_edt(mask > 0).astype(np.float32)
            stem = out_v / f"frame_{idx:05d}"
            formats.write_feature_map(f"{stem}.feat", fmap)
            formats.write_mask_pgm(f"{stem}.mask.pgm", mask)
            formats.write_dt_f32(f"{stem}.dt.f32", dt)
            formats.write_pose_txt(f"{stem}.pose.txt", R, t, *intr)
            manifest["exported_frames"] += 1

    with open(cat_dir / "export_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return cat_dir, manifest
