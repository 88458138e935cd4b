"""Byte-exact writers for the tetramorph dataset layout.

These mirror the documented on-disk contracts (CF3D feature maps, P5
masks, raw float32 distance transforms, two-line pose text, xyz points);
the consumer's loader validates every file it reads.
"""

from __future__ import annotations

import struct

import numpy as np

FEAT_MAGIC = b"CF3D"
FEAT_VERSION = 1


def write_feature_map(path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<IIII", FEAT_VERSION, c, h, w))
        fh.write(arr.tobytes())


def write_mask_pgm(path, mask):
    data = np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def write_dt_f32(path, dt):
    np.ascontiguousarray(dt, dtype="<f4").tofile(path)


def write_pose_txt(path, rotation, translation, fx, fy, cx, cy):
    vals = list(np.asarray(rotation, dtype=np.float64).reshape(-1))
    vals += list(np.asarray(translation, dtype=np.float64))
    with open(path, "w") as fh:
        fh.write(" ".join(f"{v:.17g}" for v in vals) + "\n")
        fh.write(f"{fx:.17g} {fy:.17g} {cx:.17g} {cy:.17g}\n")


def write_points_xyz(path, pts):
    with open(path, "w") as fh:
        for p in np.asarray(pts, dtype=np.float64):
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
