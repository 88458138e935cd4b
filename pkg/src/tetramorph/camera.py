"""Camera poses, 3-DoF rotations, and pinhole projection.

Conventions: camera looks down +z, x right, y down (image rows). A pose
maps canonical-space points X to camera space via ``R X + t`` and projects
with ``u = fx x/z + cx``. Pixel (row, col) covers the unit square centered
at (col + 0.5, row + 0.5). Rotations are stored as axis-angle vectors with
angle in [0, pi].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Var, stack


@dataclass
class CameraPose:
    rotation: np.ndarray     # (3,) axis-angle
    translation: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    _matrix: object = None   # cached exact matrix when built from one

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")

    @property
    def matrix(self):
        if self._matrix is None:
            self._matrix = axis_angle_to_matrix(self.rotation)
        return self._matrix

    @classmethod
    def from_matrix(cls, rot_matrix, translation, fx, fy, cx, cy, height, width):
        pose = cls(matrix_to_axis_angle(rot_matrix), translation,
                   fx, fy, cx, cy, height, width)
        pose._matrix = np.asarray(rot_matrix, dtype=np.float64)
        return pose


def axis_angle_to_matrix(v):
    """Rodrigues formula, numerically stable near zero angle."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v)
    K = np.array([[0, -v[2], v[1]],
                  [v[2], 0, -v[0]],
                  [-v[1], v[0], 0]])
    if theta < 1e-12:
        return np.eye(3) + K
    a = np.sin(theta) / theta
    half = theta / 2.0
    b = 0.5 * (np.sin(half) / half) ** 2
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_axis_angle(R):
    """Inverse of the Rodrigues map; angle returned in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-8:
        return np.zeros(3)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(w)  # = 2 sin(theta)
    if s > 1e-6:
        axis = w / s
    else:
        # theta ~ pi: rotation axis is the unit-eigenvalue direction of the
        # symmetric part cos(t) I + (1 - cos(t)) a a^T
        vals, vecs = np.linalg.eigh((R + R.T) / 2.0)
        axis = vecs[:, np.argmax(vals)]
        axis = axis / np.linalg.norm(axis)
        if s > 0 and np.dot(w, axis) < 0:
            axis = -axis
    return axis * theta


def rotation_var(axis_angle: Var) -> Var:
    """Rodrigues rotation as tape ops, so pose refinement gets gradients.

    Uses sin(x)/x forms that stay accurate for small angles; exact zero is
    regularized by a vanishing epsilon under the square root.
    """
    v = axis_angle
    zero = v[0] * 0.0
    theta = ((v * v).sum() + 1e-30).sqrt()
    a = theta.sin() / theta
    half = theta * 0.5
    b = ((half.sin() / half) ** 2) * 0.5
    x, y, z = v[0], v[1], v[2]
    K = stack([stack([zero, -z, y]), stack([z, zero, -x]), stack([-y, x, zero])])
    K2 = K @ K
    eye = np.eye(3)
    return K * a + K2 * b + eye


def project(verts, pose: CameraPose, rotation=None):
    """Project (N, 3) canonical points to pixel coordinates.

    ``verts`` may be a Var (gradients flow to vertex positions) and
    ``rotation`` may be a rotation-matrix Var overriding the pose's fixed
    rotation (gradients flow to the pose). Returns (uv, z): (N, 2) pixel
    coords and (N,) camera depths. Raises if any point is not in front of
    the camera.
    """
    R = pose.matrix if rotation is None else rotation
    t = pose.translation
    if isinstance(verts, Var) or isinstance(R, Var):
        Rt = R.T if isinstance(R, Var) else R.T.copy()
        cam = (verts @ Rt) + t
        z = cam[:, 2]
        if np.any(z.v <= 1e-6):
            raise ContractError("vertex behind camera during projection")
        u = cam[:, 0] / z * pose.fx + pose.cx
        vpix = cam[:, 1] / z * pose.fy + pose.cy
        from .autodiff import stack as _stack
        uv = _stack([u, vpix], axis=1)
        return uv, z
    cam = verts @ np.asarray(R).T + t
    z = cam[:, 2]
    if np.any(z <= 1e-6):
        raise ContractError("vertex behind camera during projection")
    uv = np.stack([cam[:, 0] / z * pose.fx + pose.cx,
                   cam[:, 1] / z * pose.fy + pose.cy], axis=1)
    return uv, z


def random_rotations(rng, n):
    """Uniform random rotation matrices via unit quaternions."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=1)


def geodesic_degrees(R1, R2):
    """Relative rotation angle in degrees: arccos((tr(R1^T R2) - 1) / 2)."""
    cos = (np.trace(np.asarray(R1).T @ np.asarray(R2)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def rotation_about(axis, degrees):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return axis_angle_to_matrix(axis * np.radians(degrees))
