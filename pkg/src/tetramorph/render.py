"""Differentiable mesh projection.

Hard visibility comes from a z-buffer over candidate (face, pixel) pairs;
attribute interpolation re-computes barycentric weights in-graph so
gradients reach vertex positions, features, and (during pose refinement)
the rotation. The soft silhouette is a probabilistic union of per-face
sigmoid coverage over the nearest faces of each pixel:

    mask(p) = 1 - prod_f (1 - sigmoid(d_f(p) / gamma))

with d_f the signed 2D distance (in normalized device units, positive
inside) from the pixel center to face f's projected boundary. Visibility
itself is treated as piecewise constant: face selection carries no
gradient, the distances and barycentrics do.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import ContractError, Tape, Var, stack, where
from .camera import CameraPose, project
from .tetgrid import Mesh


@dataclass
class RenderOut:
    """Per-pixel render products. Vars keep gradients alive; the *_map
    helpers materialize full-resolution numpy arrays."""

    height: int
    width: int
    mask: Var                 # (H, W) soft silhouette, or None when skipped
    face_id: np.ndarray       # (H, W) int, -1 = background
    cov_pixels: np.ndarray    # (P,) flat indices of covered pixels
    cov_faces: np.ndarray     # (P,) face id per covered pixel
    cov_bary: Var             # (P, 3) barycentric weights, in-graph
    cov_features: Var         # (P, D) blended features, or None
    cov_vertex: np.ndarray    # (P,) max-weight vertex id per covered pixel
    uv: Var                   # (N, 2) projected vertices
    depth: np.ndarray         # (H, W) z-buffer values, +inf background

    def bary_map(self):
        out = np.zeros((self.height * self.width, 3))
        if self.cov_pixels.size:
            out[self.cov_pixels] = self.cov_bary.v
        return out.reshape(self.height, self.width, 3)

    def vertex_id_map(self):
        out = np.full(self.height * self.width, -1, dtype=np.int64)
        if self.cov_pixels.size:
            out[self.cov_pixels] = self.cov_vertex
        return out.reshape(self.height, self.width)

    def feature_map(self):
        if self.cov_features is None:
            raise ContractError("mesh had no features attached")
        d = self.cov_features.v.shape[1]
        out = np.zeros((self.height * self.width, d))
        if self.cov_pixels.size:
            out[self.cov_pixels] = self.cov_features.v
        return out.reshape(self.height, self.width, d).transpose(2, 0, 1)


def _pixel_centers(h, w):
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=1)


def _cross2(ax, ay, bx, by):
    return ax * by - ay * bx


def _hard_raster(uv, z, faces, h, w):
    """Z-buffer over bbox candidate pairs; ties resolved to the lowest
    face id. Returns (cov_pixels, cov_faces, depth)."""
    depth = np.full(h * w, np.inf)
    if faces.shape[0] == 0:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64),
                depth.reshape(h, w))
    tri = uv[faces]                       # (F, 3, 2)
    x0 = np.clip(np.floor(tri[:, :, 0].min(1) - 0.5), 0, w - 1).astype(np.int64)
    x1 = np.clip(np.ceil(tri[:, :, 0].max(1) - 0.5), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(tri[:, :, 1].min(1) - 0.5), 0, h - 1).astype(np.int64)
    y1 = np.clip(np.ceil(tri[:, :, 1].max(1) - 0.5), 0, h - 1).astype(np.int64)
    outside = (tri[:, :, 0].max(1) < 0.5) | (tri[:, :, 0].min(1) > w - 0.5) | \
              (tri[:, :, 1].max(1) < 0.5) | (tri[:, :, 1].min(1) > h - 0.5)
    area = _cross2(tri[:, 1, 0] - tri[:, 0, 0], tri[:, 1, 1] - tri[:, 0, 1],
                   tri[:, 2, 0] - tri[:, 0, 0], tri[:, 2, 1] - tri[:, 0, 1])
    keep = (~outside) & (np.abs(area) > 1e-12)
    fidx = np.nonzero(keep)[0]
    if fidx.size == 0:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64),
                depth.reshape(h, w))
    nx = x1[fidx] - x0[fidx] + 1
    ny = y1[fidx] - y0[fidx] + 1
    counts = nx * ny
    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    cand = np.arange(total)
    which = np.searchsorted(offsets, cand, side="right") - 1
    local = cand - offsets[which]
    f = fidx[which]
    col = x0[f] + local % nx[which]
    row = y0[f] + local // nx[which]
    px = col + 0.5
    py = row + 0.5

    a, b, c = tri[f, 0], tri[f, 1], tri[f, 2]
    w0 = _cross2(c[:, 0] - b[:, 0], c[:, 1] - b[:, 1], px - b[:, 0], py - b[:, 1])
    w1 = _cross2(a[:, 0] - c[:, 0], a[:, 1] - c[:, 1], px - c[:, 0], py - c[:, 1])
    w2 = _cross2(b[:, 0] - a[:, 0], b[:, 1] - a[:, 1], px - a[:, 0], py - a[:, 1])
    ar = area[f]
    inside = ((w0 * ar >= 0) & (w1 * ar >= 0) & (w2 * ar >= 0))
    if not np.any(inside):
        return (np.zeros(0, np.int64), np.zeros(0, np.int64),
                depth.reshape(h, w))
    f, row, col = f[inside], row[inside], col[inside]
    l0, l1, l2 = w0[inside] / ar[inside], w1[inside] / ar[inside], w2[inside] / ar[inside]
    zc = l0 * z[faces[f, 0]] + l1 * z[faces[f, 1]] + l2 * z[faces[f, 2]]
    pix = row * w + col
    order = np.lexsort((f, zc, pix))
    pix, f, zc = pix[order], f[order], zc[order]
    first = np.concatenate([[True], pix[1:] != pix[:-1]])
    cov_pixels = pix[first]
    cov_faces = f[first]
    depth[cov_pixels] = zc[first]
    return cov_pixels, cov_faces, depth.reshape(h, w)


def _bary_in_graph(uv: Var, faces, cov_faces, centers):
    a = uv.take(faces[cov_faces, 0])
    b = uv.take(faces[cov_faces, 1])
    c = uv.take(faces[cov_faces, 2])
    px, py = centers[:, 0], centers[:, 1]

    def cr(u0, u1, v0, v1):
        return u0 * v1 - u1 * v0

    area = cr(b[:, 0] - a[:, 0], b[:, 1] - a[:, 1], c[:, 0] - a[:, 0], c[:, 1] - a[:, 1])
    w0 = cr(c[:, 0] - b[:, 0], c[:, 1] - b[:, 1], px - b[:, 0], py - b[:, 1])
    w1 = cr(a[:, 0] - c[:, 0], a[:, 1] - c[:, 1], px - c[:, 0], py - c[:, 1])
    w2 = cr(b[:, 0] - a[:, 0], b[:, 1] - a[:, 1], px - a[:, 0], py - a[:, 1])
    return stack([w0 / area, w1 / area, w2 / area], axis=1)


def _segment_distance(px, py, ax, ay, bx, by):
    """Point-to-segment distance with the projection clamped to the
    segment; differentiable in the endpoints."""
    ex = bx - ax
    ey = by - ay
    len2 = (ex * ex + ey * ey).maximum(1e-12)
    t = ((px - ax) * ex + (py - ay) * ey) / len2
    t = t.clip(0.0, 1.0)
    dx = px - (ax + t * ex)
    dy = py - (ay + t * ey)
    return (dx * dx + dy * dy + 1e-18).sqrt()


def soft_silhouette(uv: Var, faces, h, w, gamma=1e-2, n_faces=8,
                    cov_pixels=None, cov_faces=None):
    """Probabilistic-union silhouette over each pixel's nearest faces.

    Face selection uses centroid distance (piecewise constant); when the
    hard raster covered a pixel its covering face is forced into the set
    so interior pixels always saturate.
    """
    tape = uv.tape
    if faces.shape[0] == 0:
        return tape.leaf(np.zeros((h, w)))
    centers = _pixel_centers(h, w).astype(uv.v.dtype)
    k = min(n_faces, faces.shape[0])
    centroids = uv.v[faces].mean(axis=1)
    _, near = cKDTree(centroids).query(centers, k=k)
    near = near.reshape(h * w, k)
    if cov_pixels is not None and cov_pixels.size:
        present = (near[cov_pixels] == cov_faces[:, None]).any(axis=1)
        rep = cov_pixels[~present]
        near[rep, k - 1] = cov_faces[~present]

    ndc = 2.0 / max(h, w)
    tri = uv.take(faces[near].reshape(-1))          # (HW*k*3, 2)
    tx = tri[:, 0].reshape(h * w, k, 3)
    ty = tri[:, 1].reshape(h * w, k, 3)
    px = centers[:, 0].reshape(-1, 1)
    py = centers[:, 1].reshape(-1, 1)

    dmin = None
    for e in range(3):
        ax, ay = tx[:, :, e], ty[:, :, e]
        bx, by = tx[:, :, (e + 1) % 3], ty[:, :, (e + 1) % 3]
        d = _segment_distance(px, py, ax, ay, bx, by)
        dmin = d if dmin is None else dmin.minimum(d)

    # inside test (constant): consistent edge-cross signs
    txv, tyv = tx.v, ty.v
    pxv, pyv = px.reshape(-1, 1), py.reshape(-1, 1)
    area = _cross2(txv[:, :, 1] - txv[:, :, 0], tyv[:, :, 1] - tyv[:, :, 0],
                   txv[:, :, 2] - txv[:, :, 0], tyv[:, :, 2] - tyv[:, :, 0])
    inside = np.ones_like(area, dtype=bool)
    for e in range(3):
        w_e = _cross2(txv[:, :, (e + 1) % 3] - txv[:, :, e],
                      tyv[:, :, (e + 1) % 3] - tyv[:, :, e],
                      pxv - txv[:, :, e], pyv - tyv[:, :, e])
        inside &= (w_e * area >= 0)
    inside &= np.abs(area) > 1e-12

    signed = where(inside, dmin, -dmin) * ndc
    s = (signed / gamma).sigmoid()
    miss = 1.0 - s[:, 0]
    for j in range(1, k):
        miss = miss * (1.0 - s[:, j])
    return (1.0 - miss).reshape(h, w)


def rasterize(mesh: Mesh, pose: CameraPose, rotation=None, with_soft_mask=True,
              gamma=1e-2, soft_faces=8, features=None) -> RenderOut:
    """Project and rasterize a mesh.

    ``rotation`` may be a (3, 3) Var to route gradients into the pose.
    ``features`` overrides ``mesh.features``. Raises when a vertex lands
    behind the camera; an empty mesh renders to an all-background image.
    """
    h, w = pose.height, pose.width
    tape = mesh.vertices.tape
    if mesh.vertex_count == 0:
        zero_mask = tape.leaf(np.zeros((h, w)))
        return RenderOut(h, w, zero_mask if with_soft_mask else None,
                         np.full((h, w), -1, np.int64),
                         np.zeros(0, np.int64), np.zeros(0, np.int64),
                         tape.leaf(np.zeros((0, 3))), None,
                         np.zeros(0, np.int64), tape.leaf(np.zeros((0, 2))),
                         np.full((h, w), np.inf))

    uv, z = project(mesh.vertices, pose, rotation=rotation)
    cov_pixels, cov_faces, depth = _hard_raster(uv.v, z.v, mesh.faces, h, w)

    centers = _pixel_centers(h, w).astype(tape.dtype)
    bary = _bary_in_graph(uv, mesh.faces, cov_faces, centers[cov_pixels])

    feats = features if features is not None else mesh.features
    cov_features = None
    if feats is not None and cov_pixels.size:
        fverts = mesh.faces[cov_faces]                      # (P, 3)
        f0 = feats.take(fverts[:, 0])
        f1 = feats.take(fverts[:, 1])
        f2 = feats.take(fverts[:, 2])
        b0 = bary[:, 0].reshape(-1, 1)
        b1 = bary[:, 1].reshape(-1, 1)
        b2 = bary[:, 2].reshape(-1, 1)
        cov_features = f0 * b0 + f1 * b1 + f2 * b2
    elif feats is not None:
        cov_features = tape.leaf(np.zeros((0, feats.shape[1])))

    cov_vertex = np.zeros(0, np.int64)
    if cov_pixels.size:
        cov_vertex = mesh.faces[cov_faces, np.argmax(bary.v, axis=1)]

    face_map = np.full(h * w, -1, np.int64)
    face_map[cov_pixels] = cov_faces

    mask = None
    if with_soft_mask:
        mask = soft_silhouette(uv, mesh.faces, h, w, gamma=gamma,
                               n_faces=soft_faces, cov_pixels=cov_pixels,
                               cov_faces=cov_faces)

    return RenderOut(h, w, mask, face_map.reshape(h, w), cov_pixels,
                     cov_faces, bary, cov_features, cov_vertex, uv, depth)


def render_surface_prob(render: RenderOut, positions, sample_ids, sigma):
    """Target distribution over sampled vertices + background per pixel.

    Covered pixel: a Gaussian-in-distance distribution centered on the
    pixel's visible vertex, restricted and renormalized to the sampled
    vertices (background slot 0). Uncovered pixel: background slot 1.
    Detached: the result is a plain array used as a training target.
    """
    sample_ids = np.asarray(sample_ids)
    if sample_ids.size == 0:
        raise ContractError("empty vertex sample set")
    if sigma <= 0:
        raise ContractError("sigma must be positive")
    h, w = render.height, render.width
    k = sample_ids.size
    out = np.zeros((h * w, k + 1))
    out[:, k] = 1.0
    if render.cov_pixels.size:
        vid = render.cov_vertex
        d2 = ((positions[vid][:, None, :] - positions[sample_ids][None, :, :]) ** 2).sum(-1)
        logits = -d2 / (2.0 * sigma * sigma)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        p = e / e.sum(axis=1, keepdims=True)
        out[render.cov_pixels, :k] = p
        out[render.cov_pixels, k] = 0.0
    return out.reshape(h, w, k + 1)


# -- debug output ---------------------------------------------------------------

def write_pgm(path, image):
    """8-bit binary PGM from floats in [0, 1]."""
    img = np.clip(np.asarray(image), 0.0, 1.0)
    data = (img * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def write_ppm(path, image):
    """8-bit binary PPM from (H, W, 3) floats in [0, 1]."""
    img = np.clip(np.asarray(image), 0.0, 1.0)
    data = (img * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def feature_pca_image(render: RenderOut):
    """Project rendered features to 3 principal components for inspection."""
    h, w = render.height, render.width
    rgb = np.zeros((h * w, 3))
    if render.cov_pixels.size:
        f = render.cov_features.v
        f = f - f.mean(axis=0, keepdims=True)
        _, _, vt = np.linalg.svd(f, full_matrices=False)
        proj = f @ vt[:3].T
        lo, hi = proj.min(axis=0), proj.max(axis=0)
        rgb[render.cov_pixels] = (proj - lo) / np.maximum(hi - lo, 1e-9)
    return rgb.reshape(h, w, 3)
