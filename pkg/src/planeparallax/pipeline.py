"""Stage functions shared by the CLI and the end-to-end tests.

Each stage takes in-memory inputs and returns a result dataclass; file
handling lives in the CLI.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .decomposition import (DecompositionCandidate, ScaledTranslation, SparseDepth,
                            decompose_homography, frame_a_plane, plane_at_infinity_depth,
                            recomposition_residual, select_solution)
from .errors import InsufficientInliers, NoEgoMotion, NoParallax
from .geometry import CameraIntrinsics, PlanarHomography, ReferencePlane, RigidPose, warp
from .homography import (MIN_PARALLAX_PX, CorrespondenceSet, Epipole, RansacParams,
                         RansacResult, RefinementResult, ransac_homography,
                         refine_homography_parallax, robust_epipole)
from .parallax import (EPIPOLE_RADIUS_PX, GAMMA_RANGE, OUT_OF_RANGE, DepthMap, StructureMap,
                       StructureSamples, epipole_exclusion_mask, pixel_index, samples_to_depth,
                       splat, structure_samples)

logger = logging.getLogger(__name__)


def mask_lookup(mask: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Mask value at the nearest cell of each pixel; False outside the grid."""
    h, w = mask.shape
    rows, cols, inside = pixel_index(np.asarray(pixels, dtype=float), (w, h))
    out = np.zeros(len(rows), dtype=bool)
    out[inside] = mask[rows[inside], cols[inside]]
    return out


@dataclass(eq=False)
class EstimateResult:
    ransac: RansacResult
    epipole_inliers: np.ndarray
    refinement: RefinementResult | None
    homography: PlanarHomography
    epipole: Epipole
    candidates: list[DecompositionCandidate]
    selected: DecompositionCandidate
    recomposition: float

    @property
    def k_scale(self) -> float:
        return self.selected.k_scale


def estimate(matches: CorrespondenceSet, K: CameraIntrinsics,
             params: RansacParams = RansacParams(), plane_mask: np.ndarray | None = None,
             min_parallax: float = MIN_PARALLAX_PX, refine: bool = True,
             normal_prior=(0.0, 1.0, 0.0), epipole_threshold: float = 1.5) -> EstimateResult:
    """RANSAC homography, epipole from residual parallax, refinement, decomposition.

    ``plane_mask`` (source-frame grid) restricts RANSAC to matches whose
    ``p_b`` lies on the segmented plane. The matches RANSAC rejects (and that
    lie off the mask) carry the parallax; a robust epipole fit discards the
    gross outliers among them before the refinement.
    """
    use = None if plane_mask is None else mask_lookup(plane_mask, matches.p_b)
    if use is not None and int((use & matches.is_static).sum()) < 4:
        raise InsufficientInliers("fewer than 4 static matches inside the plane mask")
    ransac = ransac_homography(matches, params, use)
    H = ransac.homography
    # off-plane candidates: static, rejected by RANSAC and, with a mask, off the plane
    parallax_set = matches.is_static & ~ransac.inlier_mask
    if use is not None:
        parallax_set &= ~use
    p_w = warp(H, matches.p_b)
    try:
        robust = robust_epipole(p_w[parallax_set], matches.p_a[parallax_set], epipole_threshold,
                                min_parallax, seed=params.seed)
    except NoParallax as exc:
        raise NoEgoMotion(f"no residual parallax off the plane; the camera did not translate ({exc})")
    epipole = robust.epipole
    epipole_inliers = np.zeros(len(matches), dtype=bool)
    epipole_inliers[np.flatnonzero(parallax_set)[robust.inlier_mask]] = True

    refinement = None
    if refine and not epipole.at_infinity:
        flow_ok = np.linalg.norm(matches.p_a - p_w, axis=1) >= min_parallax
        used = epipole_inliers & flow_ok
        if used.sum() >= 8:
            refinement = refine_homography_parallax(H, matches, epipole, use=used,
                                                    min_parallax=min_parallax,
                                                    anchors=ransac.inlier_mask,
                                                    anchor_weight=1.0, weighting="parallax")
            H = refinement.homography

    candidates = decompose_homography(H, K)
    if len(candidates) == 1 and candidates[0].is_pure_rotation:
        raise NoEgoMotion("homography is a pure rotation; the camera did not translate")
    selected = select_solution(candidates, matches.subset(ransac.inlier_mask), K, normal_prior)
    sign = int(np.sign(selected.k_scale))
    if epipole.at_infinity:
        epipole = Epipole.from_translation(K, selected.scaled_translation)
    else:
        epipole = epipole.with_sign(sign)
    return EstimateResult(ransac, epipole_inliers, refinement, H, epipole, candidates, selected,
                          recomposition_residual(selected, H, K))


def structure(matches: CorrespondenceSet, H: PlanarHomography, epipole: Epipole, k_scale: float,
              exclusion_radius: float = EPIPOLE_RADIUS_PX, min_parallax: float = MIN_PARALLAX_PX,
              gamma_range=GAMMA_RANGE) -> StructureSamples:
    if epipole.at_infinity:
        raise NoEgoMotion("epipole at infinity; structure needs forward translation")
    if k_scale == 0:
        raise NoEgoMotion("zero forward translation; structure is unobservable")
    return structure_samples(matches, H, epipole, k_scale, exclusion_radius, min_parallax,
                             gamma_range)


def rasterize_structure(samples: StructureSamples, grid_size, epipole: Epipole, k_scale: float,
                        exclusion_radius: float = EPIPOLE_RADIUS_PX) -> StructureMap:
    values, valid, owner = splat(samples.pixels, samples.gamma, samples.valid, grid_size)
    hit = owner >= 0
    oor = np.zeros(values.shape, dtype=bool)
    oor[hit] = samples.reason[owner[hit]] == OUT_OF_RANGE
    valid &= ~epipole_exclusion_mask(grid_size, epipole, exclusion_radius)
    values[~valid] = np.nan
    return StructureMap(values, valid, epipole, float(k_scale), oor)


def structure_route_depth(samples: StructureSamples, plane_a: ReferencePlane,
                          K: CameraIntrinsics) -> SparseDepth:
    """Depth at each match from its structure and the target-frame plane."""
    Z, valid = samples_to_depth(samples, plane_a, K)
    return SparseDepth(samples.pixels.copy(), Z, np.full(len(Z), np.nan), valid)


def infinity_route_depth(matches: CorrespondenceSet, K: CameraIntrinsics, pose: RigidPose,
                         min_parallax: float = MIN_PARALLAX_PX) -> SparseDepth:
    return plane_at_infinity_depth(matches, K, pose.rotation,
                                   ScaledTranslation.from_translation(K, pose.translation),
                                   min_parallax)


def odometry_from_estimate(result: EstimateResult, plane_distance_b: float):
    """Metric pose and target-frame plane from the selected decomposition and a known plane distance."""
    c = result.selected
    pose = RigidPose(c.rotation, c.scaled_translation * plane_distance_b)
    return pose, frame_a_plane(c, plane_distance_b)


def depth_grid(depth: SparseDepth, grid_size, exclude: np.ndarray | None = None) -> DepthMap:
    values, valid, _ = splat(depth.pixels, depth.depth_a, depth.valid, grid_size)
    if exclude is not None:
        valid &= ~exclude
        values[~valid] = np.nan
    return DepthMap(values, valid)
