"""Motion and plane from a homography, and direct depth via the plane at infinity.

The decomposition follows the SVD construction of Ma, Soatto, Kosecka and
Sastry: after calibrating, the homography is scaled so its middle singular
value is 1 and its determinant is positive; it then equals ``R + t n^T / D``
for up to four ``(R, t/D, n)`` triples.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NoEgoMotion, NoValidCandidate
from .geometry import CameraIntrinsics, PlanarHomography, ReferencePlane, homogeneous
from .homography import MIN_PARALLAX_PX, CorrespondenceSet

logger = logging.getLogger(__name__)

PURE_ROTATION_TOL = 1e-6
GROUND_NORMAL = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True, eq=False)
class DecompositionCandidate:
    """One ``(R, t/D, n)`` explanation of a calibrated homography.

    ``normal`` is None for a pure rotation, where the plane is unobservable.
    """

    rotation: np.ndarray
    scaled_translation: np.ndarray
    normal: np.ndarray | None

    @property
    def is_pure_rotation(self) -> bool:
        return self.normal is None

    @property
    def k_scale(self) -> float:
        """``T_Z / D``; the third row of K is (0, 0, 1), so this is ``t_z / D``."""
        return float(self.scaled_translation[2])

    def calibrated(self) -> np.ndarray:
        if self.normal is None:
            return self.rotation.copy()
        return self.rotation + np.outer(self.scaled_translation, self.normal)

    def recompose(self, K: CameraIntrinsics) -> PlanarHomography:
        return PlanarHomography(K.K @ self.calibrated() @ K.K_inv)


@dataclass(frozen=True, eq=False)
class ScaledTranslation:
    """Translation mapped into pixel units, ``T = K t``."""

    T: np.ndarray

    @classmethod
    def from_translation(cls, K: CameraIntrinsics, t) -> "ScaledTranslation":
        return cls(K.K @ np.asarray(t, dtype=float))

    @property
    def T_Z(self) -> float:
        return float(self.T[2])

    @property
    def epipole(self) -> np.ndarray:
        return self.T[:2] / self.T[2]


def calibrate_homography(H: PlanarHomography, K: CameraIntrinsics) -> np.ndarray:
    """``K^-1 H K`` scaled to middle singular value 1 and positive determinant.

    A positive determinant means both cameras see the plane from the same side
    (``det(R + t n^T/D) = D_a / D_b``), which fixes the sign of the scale.
    """
    G = K.K_inv @ H.matrix @ K.K
    G = G / np.linalg.svd(G, compute_uv=False)[1]
    if np.linalg.det(G) < 0:
        G = -G
    return G


def _nearest_rotation(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


def decompose_homography(H: PlanarHomography, K: CameraIntrinsics,
                         pure_rotation_tol: float = PURE_ROTATION_TOL) -> list[DecompositionCandidate]:
    """All ``(R, t/D, n)`` with ``K^-1 (s H) K = R + (t/D) n^T`` for some s > 0.

    Returns four candidates in general (two physical solutions and their
    ``(-t, -n)`` mirrors). If the calibrated homography is orthonormal to
    within ``pure_rotation_tol`` a single pure-rotation candidate is returned
    instead, with zero translation and ``normal=None``.
    """
    G = calibrate_homography(H, K)
    if np.abs(G.T @ G - np.eye(3)).max() < pure_rotation_tol:
        return [DecompositionCandidate(_nearest_rotation(G), np.zeros(3), None)]

    _, s, Vt = np.linalg.svd(G)
    V = Vt.T
    if np.linalg.det(V) < 0:
        V = -V
    s1sq, s3sq = s[0] ** 2, s[2] ** 2
    v1, v2, v3 = V[:, 0], V[:, 1], V[:, 2]
    a = np.sqrt(max(1.0 - s3sq, 0.0))
    b = np.sqrt(max(s1sq - 1.0, 0.0))
    c = np.sqrt(s1sq - s3sq)
    u1 = (a * v1 + b * v3) / c
    u2 = (a * v1 - b * v3) / c

    candidates = []
    for u in (u1, u2):
        U = np.column_stack([v2, u, np.cross(v2, u)])
        W = np.column_stack([G @ v2, G @ u, np.cross(G @ v2, G @ u)])
        R = _nearest_rotation(W @ U.T)
        n = np.cross(v2, u)
        n = n / np.linalg.norm(n)
        t = (G - R) @ n
        candidates.append(DecompositionCandidate(R, t, n))
    candidates += [DecompositionCandidate(c.rotation, -c.scaled_translation, -c.normal)
                   for c in candidates[:2]]
    return candidates


def recomposition_residual(candidate: DecompositionCandidate, H: PlanarHomography,
                           K: CameraIntrinsics) -> float:
    return candidate.recompose(K).distance(H)


def triangulate_depths(m_b: np.ndarray, m_a: np.ndarray, R: np.ndarray, t: np.ndarray):
    """Least-squares depths ``(Z_b, Z_a)`` with ``Z_a m_a = Z_b R m_b + t``.

    ``m_b``, ``m_a`` are normalized rays with z = 1. Depths come out in the
    units of ``t``.
    """
    Rm = m_b @ R.T
    # normal equations of the 3x2 system [R m_b, -m_a] [Z_b, Z_a]^T = -t
    a11 = np.einsum("ij,ij->i", Rm, Rm)
    a12 = -np.einsum("ij,ij->i", Rm, m_a)
    a22 = np.einsum("ij,ij->i", m_a, m_a)
    b1 = -Rm @ t
    b2 = m_a @ t
    det = a11 * a22 - a12 ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        Z_b = (a22 * b1 - a12 * b2) / det
        Z_a = (a11 * b2 - a12 * b1) / det
    return Z_b, Z_a


def plane_depths(candidate: DecompositionCandidate, m_b: np.ndarray):
    """Depths ``(Z_b, Z_a)`` of plane points in units of the plane distance.

    A point on the plane along ray ``m_b`` has ``Z_b = D / (n . m_b)`` and
    maps to ``Z_b (R + t n^T / D) m_b`` in frame a.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        Z_b = 1.0 / (m_b @ candidate.normal)
    Z_a = Z_b * (m_b @ candidate.calibrated()[2])
    return Z_b, Z_a


def cheirality_count(candidate: DecompositionCandidate, matches: CorrespondenceSet,
                     K: CameraIntrinsics, method: str = "plane") -> int:
    """Number of static matches with positive depth in both frames.

    ``method="plane"`` treats the matches as plane points and uses their
    plane-induced depths, which are exact under the candidate; pass the
    homography inliers. ``method="triangulate"`` triangulates each match from
    the two rays, suitable for general rigid points.
    """
    if candidate.is_pure_rotation:
        return 0
    static = matches.static()
    m_b = homogeneous(static.p_b) @ K.K_inv.T
    if method == "plane":
        Z_b, Z_a = plane_depths(candidate, m_b)
    elif method == "triangulate":
        m_a = homogeneous(static.p_a) @ K.K_inv.T
        Z_b, Z_a = triangulate_depths(m_b, m_a, candidate.rotation, candidate.scaled_translation)
    else:
        raise ValueError(f"unknown cheirality method {method!r}")
    return int(np.sum((Z_b > 0) & (Z_a > 0)))


def select_solution(candidates: list[DecompositionCandidate], matches: CorrespondenceSet,
                    K: CameraIntrinsics, normal_prior=GROUND_NORMAL,
                    method: str = "plane") -> DecompositionCandidate:
    """Pick the candidate with the most points in front of both cameras.

    Ties go to the normal best aligned with ``normal_prior``; the default is a
    ground plane below the camera in the y-down convention.
    """
    if not candidates:
        raise ValueError("no candidates to choose from")
    if len(candidates) == 1:
        return candidates[0]
    prior = np.asarray(normal_prior, dtype=float)
    n_static = int(matches.is_static.sum())
    scored = []
    for i, c in enumerate(candidates):
        count = cheirality_count(c, matches, K, method)
        align = -np.inf if c.normal is None else float(c.normal @ prior)
        scored.append((count, align, -i))
    best = max(range(len(candidates)), key=lambda i: scored[i])
    if scored[best][0] * 2 <= n_static:
        raise NoValidCandidate("every candidate puts most points behind a camera")
    return candidates[best]


@dataclass
class SparseDepth:
    """Per-match depths at the match positions.

    ``depth_a`` is the depth in the target frame (where ``pixels`` live) and
    ``depth_b`` the depth of the same point in the source frame.
    """

    pixels: np.ndarray
    depth_a: np.ndarray
    depth_b: np.ndarray
    valid: np.ndarray


def infinity_homography(K: CameraIntrinsics, R) -> np.ndarray:
    return K.K @ np.asarray(R, dtype=float) @ K.K_inv


def plane_at_infinity_depth(matches: CorrespondenceSet, K: CameraIntrinsics, R,
                            T: ScaledTranslation, min_parallax: float = MIN_PARALLAX_PX,
                            no_motion_tol: float = 1e-9) -> SparseDepth:
    """Depth from flow and odometry with the reference plane at infinity.

    With ``q = K R K^-1 p_b`` and ``p_inf = q / q_z``, the exact relation
    ``Z_a p_a = Z_b q + T`` gives ``Z_a (p_a - p_inf) = T_Z (e - p_inf)``; the
    inverse depth is solved in least squares along ``e - p_inf`` and
    ``Z_b = (Z_a - T_Z) / q_z``. Matches whose parallax ``|p_a - p_inf|`` is
    under ``min_parallax`` are invalid, as are dynamic matches.
    """
    if np.linalg.norm(T.T) <= no_motion_tol:
        raise NoEgoMotion("translation is zero; depth is unobservable")
    if T.T_Z == 0:
        raise ValueError("plane-at-infinity depth needs a nonzero forward translation")
    q = homogeneous(matches.p_b) @ infinity_homography(K, R).T
    q_z = q[:, 2]
    p_inf = q[:, :2] / q_z[:, None]
    e = T.epipole
    par = matches.p_a - p_inf
    ray = e - p_inf
    valid = matches.is_static & (np.linalg.norm(par, axis=1) >= min_parallax)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_depth = np.einsum("ij,ij->i", par, ray) / (T.T_Z * np.einsum("ij,ij->i", ray, ray))
        Z_a = 1.0 / inv_depth
        Z_b = (Z_a - T.T_Z) / q_z
    valid &= np.isfinite(Z_a) & (Z_a > 0) & np.isfinite(Z_b) & (Z_b > 0)
    Z_a = np.where(valid, Z_a, np.nan)
    Z_b = np.where(valid, Z_b, np.nan)
    return SparseDepth(matches.p_a.copy(), Z_a, Z_b, valid)


def frame_a_plane(candidate: DecompositionCandidate, plane_distance_b: float):
    """Reference plane in the target frame given the source-frame plane distance."""
    n_a = candidate.rotation @ candidate.normal
    t = candidate.scaled_translation * plane_distance_b
    D_a = plane_distance_b + float(n_a @ t)
    return ReferencePlane(n_a / np.linalg.norm(n_a), D_a)

