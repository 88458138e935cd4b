"""Training objectives.

Geometric terms compare the rendered silhouette to the mask and its
distance transform, the deformed vertices to the instance point cloud
(symmetric chamfer with plain L2 distances), and regularize the shape
field's gradient norm toward 1 plus the deformation's magnitude and
edge-wise smoothness. The appearance term is a pixel-wise cross entropy
between the feature-similarity distribution over sampled vertex
descriptors (plus a background slot) and the rendered surface
distribution used as a detached target.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import ContractError, DimensionError, Var, concat, log_softmax


@dataclass
class LossWeights:
    """Balancing weights of the combined objectives plus the similarity
    temperature; defaults are the engine's documented training setup."""

    appearance: float = 0.1
    chamfer: float = 0.1
    mask: float = 1.0
    mask_dt: float = 100.0
    eikonal: float = 0.01
    deform: float = 0.1
    deform_smooth: float = 0.01
    temperature: float = 14.3

    def __post_init__(self):
        for name in ("appearance", "chamfer", "mask", "mask_dt", "eikonal",
                     "deform", "deform_smooth", "temperature"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be >= 0")


TEMPLATE_PARTS = ("chamfer", "mask", "mask_dt", "eikonal")
JOINT_PARTS = TEMPLATE_PARTS + ("appearance", "deform", "deform_smooth")


def mask_loss(soft_mask: Var, mask) -> Var:
    """Mean squared pixel-wise deviation of the rendered silhouette."""
    mask = np.asarray(mask, dtype=np.float64)
    if soft_mask.shape != mask.shape:
        raise DimensionError(f"mask shapes differ: {soft_mask.shape} vs {mask.shape}")
    d = soft_mask - mask
    return (d * d).mean()


def mask_dt_loss(soft_mask: Var, dist_transform) -> Var:
    """Negative mean overlap with the mask's interior distance transform;
    grows the silhouette into the mask and never rewards spilling out."""
    dt = np.asarray(dist_transform, dtype=np.float64)
    if soft_mask.shape != dt.shape:
        raise DimensionError(f"dt shapes differ: {soft_mask.shape} vs {dt.shape}")
    if np.any(dt < 0):
        raise ContractError("distance transform must be non-negative")
    return -(soft_mask * dt).mean()


def chamfer_loss(deformed: Var, points, points_tree=None) -> Var:
    """Symmetric nearest-neighbor distance, L2 (not squared), normalized by
    the total count of both sets. Nearest-neighbor assignment is piecewise
    constant; distances differentiate through the vertex positions."""
    pts = np.asarray(points, dtype=np.float64)
    n = deformed.v.shape[0]
    m = pts.shape[0]
    if n == 0 or m == 0:
        raise ContractError("chamfer needs two non-empty sets")
    tree = points_tree or cKDTree(pts)
    _, idx_vp = tree.query(deformed.v)
    _, idx_pv = cKDTree(deformed.v).query(pts)

    diff_v = deformed - pts[idx_vp]
    d_v = ((diff_v * diff_v).sum(axis=1)).maximum(1e-30).sqrt()
    gathered = deformed.take(idx_pv)
    diff_p = gathered - pts
    d_p = ((diff_p * diff_p).sum(axis=1)).maximum(1e-30).sqrt()
    return (d_v.sum() + d_p.sum()) / float(n + m)


def eikonal_loss(sdf_values_grad) -> Var:
    """Mean squared deviation of the field's gradient norm from 1.

    Takes the (values, gradient) pair produced by the bound field's
    ``sdf_with_grad`` so the same forward pass can be reused.
    """
    _, grad = sdf_values_grad
    norm = ((grad * grad).sum(axis=1) + 1e-18).sqrt()
    return ((norm - 1.0) ** 2).mean()


def sample_sdf_points(positions, count, rng, noise=0.05):
    """Regularizer sample mix: half uniform in the canonical cube, half
    Gaussian-perturbed surface vertices (all uniform when no surface yet)."""
    n_uni = count if len(positions) == 0 else count // 2
    pts = [rng.uniform(-1, 1, size=(n_uni, 3))]
    n_surf = count - n_uni
    if n_surf:
        pick = rng.integers(0, len(positions), size=n_surf)
        pts.append(positions[pick] + rng.normal(0, noise, size=(n_surf, 3)))
    return np.concatenate(pts).astype(np.float64)


def deform_loss(verts, deformed: Var) -> Var:
    """Mean squared deformation magnitude per vertex."""
    verts = np.asarray(verts)
    if verts.shape[0] != deformed.v.shape[0]:
        raise DimensionError("vertex count mismatch")
    d = deformed - verts
    return (d * d).sum(axis=1).mean()


def deform_smooth_loss(edges, verts, deformed: Var) -> Var:
    """Edge-wise offset-difference norm over edge length; zero for any
    rigid translation. Zero-length edges are skipped with a warning."""
    verts = np.asarray(verts)
    edges = np.asarray(edges)
    if edges.size == 0:
        raise ContractError("mesh has no edges")
    elen = np.linalg.norm(verts[edges[:, 0]] - verts[edges[:, 1]], axis=1)
    live = elen > 1e-12
    if not np.all(live):
        warnings.warn("skipping zero-length edges in smoothness term")
        edges = edges[live]
        elen = elen[live]
    offsets = deformed - verts
    oi = offsets.take(edges[:, 0])
    oj = offsets.take(edges[:, 1])
    d = oi - oj
    num = ((d * d).sum(axis=1) + 1e-30).sqrt()
    return (num / elen).mean()


def _check_unit(arr, what, tol=1e-3):
    norms = np.linalg.norm(np.atleast_2d(arr), axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ContractError(f"{what} must be unit-norm")


def appearance_prob(si, feats, beta, temperature) -> np.ndarray:
    """Similarity distribution of one image descriptor over K sampled
    vertex descriptors plus the background slot (last)."""
    si = np.asarray(si, dtype=np.float64)
    f = np.asarray(feats, dtype=np.float64)
    b = np.asarray(beta, dtype=np.float64)
    _check_unit(si, "image feature")
    _check_unit(f, "vertex features")
    _check_unit(b, "background feature")
    logits = temperature * np.concatenate([f @ si, [b @ si]])
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def surface_prob(sampled_positions, i, sigma) -> np.ndarray:
    """Gaussian-in-distance distribution of vertex ``i`` over the sampled
    vertex set."""
    if sigma <= 0:
        raise ContractError("sigma must be positive")
    p = np.asarray(sampled_positions, dtype=np.float64)
    d2 = ((p - p[i]) ** 2).sum(axis=1)
    logits = -d2 / (2.0 * sigma * sigma)
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def compute_sigma(verts, sample_ids) -> float:
    """RMS nearest-sampled-vertex distance over all vertices.

    A vertex that is itself sampled excludes itself (otherwise the value
    degenerates to zero); if that leaves no candidates the vertex
    contributes zero.
    """
    verts = np.asarray(verts, dtype=np.float64)
    sample_ids = np.asarray(sample_ids)
    if verts.shape[0] == 0 or sample_ids.size == 0:
        raise ContractError("sigma needs non-empty vertex and sample sets")
    d2 = ((verts[:, None, :] - verts[sample_ids][None, :, :]) ** 2).sum(-1)
    self_mask = sample_ids[None, :] == np.arange(verts.shape[0])[:, None]
    d2 = np.where(self_mask, np.inf, d2)
    mins = d2.min(axis=1)
    mins = np.where(np.isfinite(mins), mins, 0.0)
    return float(np.sqrt(mins.mean()))


def appearance_loss(pixel_feats: Var, p_hat, sampled_feats: Var, beta: Var,
                    temperature) -> Var:
    """Pixel-wise cross entropy between the image-side similarity
    distribution and the rendered surface distribution (detached target).
    ``p_hat`` is (H, W, K+1) with the background slot last."""
    p_hat = np.asarray(p_hat)
    hw = p_hat.shape[0] * p_hat.shape[1]
    k = sampled_feats.v.shape[0]
    if p_hat.shape[2] != k + 1:
        raise DimensionError("target slots must equal sampled count + 1")
    if pixel_feats.v.shape[0] != hw:
        raise DimensionError(
            f"pixel features {pixel_feats.v.shape} misaligned with target {p_hat.shape}")
    logits = concat([pixel_feats @ sampled_feats.T,
                     (pixel_feats * beta.reshape(1, -1)).sum(axis=1).reshape(hw, 1)],
                    axis=1) * temperature
    logp = log_softmax(logits, axis=1)
    return -(logp * p_hat.reshape(hw, k + 1)).sum(axis=1).mean()


def farthest_point_sample(points, count, start=0) -> np.ndarray:
    """Greedy max-min subset selection, seeded at ``start`` for
    determinism; ties resolve to the lowest index."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if count > n:
        raise ContractError(f"cannot sample {count} of {n} points")
    ids = np.empty(count, dtype=np.int64)
    ids[0] = start
    d = ((pts - pts[start]) ** 2).sum(axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(d))
        ids[i] = nxt
        d = np.minimum(d, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return ids


def total_loss(stage, parts, weights: LossWeights):
    """Weighted sum of the stage's objectives.

    The template stage uses only the geometric terms and ignores any
    appearance/deformation entries; the joint stage requires all parts.
    """
    if stage == "template":
        names = TEMPLATE_PARTS
    elif stage == "joint":
        names = JOINT_PARTS
    else:
        raise ContractError(f"unknown stage {stage!r}")
    missing = [n for n in names if n not in parts]
    if missing:
        raise ContractError(f"stage {stage!r} missing loss parts: {missing}")
    w = {"chamfer": weights.chamfer, "mask": weights.mask,
         "mask_dt": weights.mask_dt, "eikonal": weights.eikonal,
         "appearance": weights.appearance, "deform": weights.deform,
         "deform_smooth": weights.deform_smooth}
    out = None
    for name in names:
        term = parts[name] * w[name]
        out = term if out is None else out + term
    return out
