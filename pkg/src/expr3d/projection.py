"""Pinhole camera projection and its derivative w.r.t. expression coefficients.

Conventions, fixed across the package:
  * Euler angles are (pitch, yaw, roll) in radians, composed as intrinsic
    rotations in that order, i.e. R = Rx(pitch) @ Ry(yaw) @ Rz(roll).
  * The camera looks down +z; translation t_z must be positive so the face
    sits in front of the camera.
  * Image coordinates are in pixels with y growing downward, matching the
    raster row direction, so no extra sign flip is applied anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, GeometryError, ValidationError

EPS_DEPTH = 1e-6


@dataclass(frozen=True)
class Pose6DoF:
    rotation: np.ndarray     # (pitch, yaw, roll) radians
    translation: np.ndarray  # (tx, ty, tz)

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).ravel()
        tr = np.array(self.translation, dtype=float).ravel()
        if rot.size != 3 or tr.size != 3:
            raise ContractError("rotation and translation must each have 3 components")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(tr))):
            raise ValidationError("pose parameters must be finite")
        if tr[2] <= 0.0:
            raise ValidationError(f"translation z must be positive, got {tr[2]}")
        rot.flags.writeable = False
        tr.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    principal_point: np.ndarray  # (cx, cy)

    def __post_init__(self):
        pp = np.array(self.principal_point, dtype=float).ravel()
        if pp.size != 2:
            raise ContractError("principal_point must have 2 components")
        if not (np.isfinite(self.focal) and self.focal > 0.0):
            raise ValidationError(f"focal must be positive and finite, got {self.focal}")
        if not np.all(np.isfinite(pp)):
            raise ValidationError("principal_point must be finite")
        pp.flags.writeable = False
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "principal_point", pp)

    def matrix(self) -> np.ndarray:
        cx, cy = self.principal_point
        return np.array([[self.focal, 0.0, cx],
                         [0.0, self.focal, cy],
                         [0.0, 0.0, 1.0]])


def rotation_matrix(pitch: float, yaw: float, roll: float) -> np.ndarray:
    """Rotation for intrinsic pitch (x), then yaw (y), then roll (z)."""
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cr, sr = np.cos(roll), np.sin(roll)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return rx @ ry @ rz


def projection_matrix(pose: Pose6DoF, intrinsics: CameraIntrinsics) -> np.ndarray:
    """3x4 projection K @ [R | t]."""
    r = rotation_matrix(*pose.rotation)
    rt = np.hstack([r, pose.translation.reshape(3, 1)])
    return intrinsics.matrix() @ rt


def project(pi: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Project (L, 3) model-space points to (L, 2) pixel coordinates.

    Raises GeometryError naming the first point whose camera depth falls at or
    below EPS_DEPTH.
    """
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (3, 4):
        raise ContractError(f"projection matrix must be 3x4, got {pi.shape}")
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ContractError(f"points must be (L, 3), got {points.shape}")
    h = points @ pi[:, :3].T + pi[:, 3]
    depth = h[:, 2]
    bad = np.flatnonzero(depth <= EPS_DEPTH)
    if bad.size:
        i = int(bad[0])
        raise GeometryError(f"point {i} has non-positive projective depth {depth[i]:.3g}", point_index=i)
    return h[:, :2] / depth[:, None]


def project_landmarks(model, pi: np.ndarray, alpha, eta) -> np.ndarray:
    """Landmark pixel positions for the given coefficients, as (L, 2)."""
    from .model import landmark_shape

    return project(pi, landmark_shape(model, alpha, eta))


def landmark_jacobian(model, pi: np.ndarray, alpha, eta) -> np.ndarray:
    """d(projected landmarks)/d(eta) as a (2L, m) matrix.

    Rows interleave per landmark: row 2i is du_i/deta, row 2i+1 is dv_i/deta.
    Derived by the chain rule through the perspective division: with
    h = P x + p4 and x linear in eta (dx/deta_j = expression sub-basis column),
    du/deta = (dh_u - u * dh_w) / h_w and likewise for v.
    """
    from .model import landmark_shape

    pi = np.asarray(pi, dtype=float)
    if pi.shape != (3, 4):
        raise ContractError(f"projection matrix must be 3x4, got {pi.shape}")
    pts = landmark_shape(model, alpha, eta)           # (L, 3)
    h = pts @ pi[:, :3].T + pi[:, 3]                  # (L, 3)
    depth = h[:, 2]
    bad = np.flatnonzero(depth <= EPS_DEPTH)
    if bad.size:
        i = int(bad[0])
        raise GeometryError(f"point {i} has non-positive projective depth {depth[i]:.3g}", point_index=i)
    a = _projected_basis(model, pi)                   # (L, 3, m)
    return _jacobian_from_parts(h, a)


def _projected_basis(model, pi: np.ndarray) -> np.ndarray:
    """P @ (expression sub-basis), reshaped per landmark: (L, 3, m).

    Constant in eta, so fitting code computes it once per (model, pose) pair.
    """
    L, m = model.n_landmarks, model.expr_dim
    e3 = model.lm_expr_basis.reshape(L, 3, m)
    return np.einsum("ab,lbm->lam", np.asarray(pi, dtype=float)[:, :3], e3)


def _jacobian_from_parts(h: np.ndarray, a: np.ndarray) -> np.ndarray:
    depth = h[:, 2:3]
    uv = h[:, :2] / depth
    j = (a[:, :2, :] - uv[:, :, None] * a[:, 2:3, :]) / depth[:, :, None]
    return j.reshape(h.shape[0] * 2, a.shape[2])
