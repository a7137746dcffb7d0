"""Pinhole camera, rigid motion, reference plane and plane-induced homography.

Conventions: right-handed camera frame with z forward and y down, lengths in
meters, image quantities in pixels. A ``RigidPose`` maps points from frame b
into frame a, ``P_a = R @ P_b + t``. A ``ReferencePlane`` is expressed in one
camera frame as ``n . P = D`` with ``D > 0``, so ``n`` points from the camera
towards the plane; for a ground plane below the camera ``n`` points down and
everything above the ground gets a negative height.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateWarp, NonPositiveDepth, PlaneParallaxError

WARP_EPS = 1e-12


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K) -> "CameraIntrinsics":
        K = np.asarray(K, dtype=float)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]))


@dataclass(frozen=True, eq=False)
class RigidPose:
    """Rigid motion from frame b to frame a: ``P_a = R P_b + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-12 or abs(np.linalg.det(R) - 1.0) > 1e-12:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        return P @ self.rotation.T + self.translation

    def inverse(self) -> "RigidPose":
        Rt = self.rotation.T
        return RigidPose(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)


@dataclass(frozen=True, eq=False)
class ReferencePlane:
    normal: np.ndarray
    distance: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"plane normal must be unit length, |n| = {norm!r}")
        if not self.distance > 0:
            raise ValueError(f"plane distance must be positive, got {self.distance!r}")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "distance", float(self.distance))

    @classmethod
    def from_normal(cls, normal, distance: float) -> "ReferencePlane":
        """Build a plane from a not necessarily unit normal."""
        n = np.asarray(normal, dtype=float)
        return cls(n / np.linalg.norm(n), distance)

    def in_frame(self, pose: RigidPose) -> "ReferencePlane":
        """Express this plane in the frame that ``pose`` maps into."""
        return plane_in_frame(self, pose)


@dataclass(frozen=True, eq=False)
class ScenePoint:
    position: np.ndarray
    plane_height: float

    @property
    def depth(self) -> float:
        return float(self.position[2])

    @classmethod
    def on(cls, plane: ReferencePlane, position) -> "ScenePoint":
        P = np.asarray(position, dtype=float)
        return cls(P, plane_height(plane, P))


def normalize_homography(A) -> np.ndarray:
    """Scale ``A`` to unit Frobenius norm with a nonnegative bottom-right entry."""
    A = np.asarray(A, dtype=float).reshape(3, 3)
    norm = np.linalg.norm(A)
    if norm == 0 or not np.isfinite(norm):
        raise PlaneParallaxError("cannot normalize a zero or non-finite homography")
    A = A / norm
    pivot = A[2, 2]
    if pivot == 0.0:
        # fall back to the first nonzero entry so the sign is still deterministic
        pivot = A.flat[np.flatnonzero(A)[0]]
    if pivot < 0:
        A = -A
    return A


@dataclass(frozen=True, eq=False)
class PlanarHomography:
    """Plane-induced 3x3 transform, stored normalized (see ``normalize_homography``)."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", normalize_homography(self.matrix))

    @property
    def a3(self) -> np.ndarray:
        return self.matrix[2]

    def inverse(self) -> "PlanarHomography":
        return PlanarHomography(np.linalg.inv(self.matrix))

    def distance(self, other: "PlanarHomography") -> float:
        """Frobenius distance between the two normalized matrices."""
        return float(np.linalg.norm(self.matrix - other.matrix))

    def __matmul__(self, other: "PlanarHomography") -> "PlanarHomography":
        return PlanarHomography(self.matrix @ other.matrix)


def homogeneous(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)


def project(K: CameraIntrinsics, P) -> np.ndarray:
    """Pinhole projection of camera-frame points, shape (3,) or (N, 3)."""
    P = np.asarray(P, dtype=float)
    Z = P[..., 2]
    if np.any(Z <= 0):
        raise NonPositiveDepth("point at or behind the camera cannot be projected")
    u = K.fx * P[..., 0] / Z + K.cx
    v = K.fy * P[..., 1] / Z + K.cy
    return np.stack([u, v], axis=-1)


def unproject_ray(K: CameraIntrinsics, p) -> np.ndarray:
    """Ray ``K^-1 (u, v, 1)`` through pixel ``p``; its z component is 1."""
    p = np.asarray(p, dtype=float)
    x = (p[..., 0] - K.cx) / K.fx
    y = (p[..., 1] - K.cy) / K.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def plane_height(plane: ReferencePlane, P) -> np.ndarray | float:
    """Signed distance ``n . P - D`` of ``P`` from the plane."""
    H = np.asarray(P, dtype=float) @ plane.normal - plane.distance
    return float(H) if np.ndim(H) == 0 else H


def plane_in_frame(plane: ReferencePlane, pose: RigidPose) -> ReferencePlane:
    """Transform a plane given in frame b into frame a, where ``pose`` maps b to a."""
    n_a = pose.rotation @ plane.normal
    D_a = plane.distance + float(n_a @ pose.translation)
    if not D_a > 0:
        raise PlaneParallaxError("camera a lies on or beyond the reference plane")
    return ReferencePlane(n_a / np.linalg.norm(n_a), D_a)


def calibrated_homography(pose: RigidPose, plane: ReferencePlane) -> np.ndarray:
    """Euclidean homography ``R + t n^T / D`` (unnormalized)."""
    return pose.rotation + np.outer(pose.translation, plane.normal) / plane.distance


def plane_induced_homography(K: CameraIntrinsics, pose: RigidPose,
                             plane: ReferencePlane) -> PlanarHomography:
    """Homography mapping frame-b pixels of plane points to frame-a pixels.

    ``pose`` maps frame b to frame a and ``plane`` is expressed in frame b.
    """
    return PlanarHomography(K.K @ calibrated_homography(pose, plane) @ K.K_inv)


def warp(H, p) -> np.ndarray:
    """Apply a homography to pixel(s) ``p`` of shape (2,) or (N, 2)."""
    A = H.matrix if isinstance(H, PlanarHomography) else np.asarray(H, dtype=float)
    q = homogeneous(p) @ A.T
    w = q[..., 2]
    if np.any(np.abs(w) < WARP_EPS):
        raise DegenerateWarp("pixel maps to the line at infinity")
    return q[..., :2] / w[..., None]


def read_intrinsics(path) -> CameraIntrinsics:
    values = [float(x) for x in Path(path).read_text().split()]
    if len(values) != 4:
        raise ValueError(f"{path}: expected 4 numbers 'fx fy cx cy', got {len(values)}")
    return CameraIntrinsics(*values)


def write_intrinsics(path, K: CameraIntrinsics) -> None:
    Path(path).write_text(" ".join(repr(float(v)) for v in (K.fx, K.fy, K.cx, K.cy)) + "\n")


def read_pose(path) -> RigidPose:
    values = np.array([float(x) for x in Path(path).read_text().split()])
    if values.size != 12:
        raise ValueError(f"{path}: expected 12 numbers (row-major [R|t]), got {values.size}")
    Rt = values.reshape(3, 4)
    return RigidPose(Rt[:, :3], Rt[:, 3])


def write_pose(path, pose: RigidPose) -> None:
    Rt = np.hstack([pose.rotation, pose.translation[:, None]])
    lines = [" ".join(repr(float(v)) for v in row) for row in Rt]
    Path(path).write_text("\n".join(lines) + "\n")


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    S = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    R = np.eye(3) + np.sin(angle) * S + (1 - np.cos(angle)) * S @ S
    # re-orthonormalize so the 1e-12 pose invariant holds after round-off
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def rotation_angle(R) -> float:
    """Angle in radians of the rotation ``R``."""
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    # arccos is ill-conditioned near 0; the skew part gives the sine directly
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return float(np.arctan2(s, c))


def angle_between(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(np.arctan2(np.linalg.norm(np.cross(u, v)), u @ v))
