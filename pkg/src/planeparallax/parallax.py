"""Plane + parallax: displacement split, projective structure and depth.

A match ``p_b -> p_a`` is warped by the reference-plane homography to
``p_w``. The planar part of the motion is ``u_pi = p_b - p_w`` and the
residual parallax ``mu = p_w - p_a``. For a rigid point

    p_a = p_w + gamma * k * (p_w - e),      gamma = H / Z_a,  k = T_Z / D_b

so ``gamma`` follows from a scalar least-squares fit along ``p_w - e``, and
the ratio of two points' ``gamma`` follows from their parallax vectors alone,
without the epipole.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindPlaneHorizon, DegeneratePair, EpipoleSingularity, PlaneParallaxError
from .geometry import CameraIntrinsics, PlanarHomography, ReferencePlane, unproject_ray, warp
from .homography import MIN_PARALLAX_PX, CorrespondenceSet, Epipole

EPIPOLE_RADIUS_PX = 5.0
GAMMA_RANGE = (-0.5, 0.06)
DEPTH_RANGE = (0.1, 100.0)

# reason codes for per-match structure failures
VALID = 0
DYNAMIC = 1
NEAR_EPIPOLE = 2
NO_MOTION = 3
OUT_OF_RANGE = 4


@dataclass(frozen=True, eq=False)
class ParallaxDecomposition:
    u_pi: np.ndarray
    mu: np.ndarray
    p_w: np.ndarray


def decompose_displacement(H: PlanarHomography, p_b, p_a) -> ParallaxDecomposition:
    """Split ``p_b - p_a`` into the planar part and the residual parallax."""
    p_b = np.asarray(p_b, dtype=float)
    p_a = np.asarray(p_a, dtype=float)
    p_w = warp(H, p_b)
    return ParallaxDecomposition(p_b - p_w, p_w - p_a, p_w)


def _epipole_point(e) -> np.ndarray:
    if isinstance(e, Epipole):
        if e.at_infinity:
            raise PlaneParallaxError("projective structure needs a finite epipole")
        return e.e
    return np.asarray(e, dtype=float)


def projective_structure(p_a, p_w, e, k_scale: float,
                         exclusion_radius: float = EPIPOLE_RADIUS_PX,
                         return_residual: bool = False):
    """Least-squares ``gamma`` in ``p_a = p_w + gamma k (p_w - e)``.

    With ``return_residual`` the signed component of ``p_a - p_w``
    perpendicular to ``p_w - e`` is returned as well; it is zero for a rigid
    point and an exact epipole.
    """
    if k_scale == 0:
        raise ValueError("k_scale = T_Z / D must be nonzero")
    p_a = np.asarray(p_a, dtype=float)
    p_w = np.asarray(p_w, dtype=float)
    ray = p_w - _epipole_point(e)
    dist = float(np.linalg.norm(ray))
    if dist < exclusion_radius or dist == 0.0:
        raise EpipoleSingularity(f"warped point is {dist:.3g} px from the epipole")
    d = p_a - p_w
    gamma = float(d @ ray) / (k_scale * dist ** 2)
    if return_residual:
        return gamma, float(d[0] * ray[1] - d[1] * ray[0]) / dist
    return gamma


def _perp(v):
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def relative_structure(mu1, mu2, p_w1, p_w2) -> float:
    """``gamma_2 / gamma_1`` from two residual parallax vectors, no epipole needed."""
    dp = np.asarray(p_w2, dtype=float) - np.asarray(p_w1, dtype=float)
    if np.linalg.norm(dp) < 1e-9:
        raise DegeneratePair("the two warped points coincide")
    perp = _perp(dp)
    denom = float(np.asarray(mu1, dtype=float) @ perp)
    if abs(denom) < 1e-12:
        raise DegeneratePair("reference parallax is parallel to the point separation")
    return float(np.asarray(mu2, dtype=float) @ perp) / denom


@dataclass
class Propagated:
    gamma: np.ndarray
    valid: np.ndarray


def propagate_structure(anchor, targets) -> Propagated:
    """Spread a known ``gamma`` from one anchor to other points via relative structure.

    ``anchor`` is ``(p_w, mu, gamma)``; ``targets`` is a sequence of
    ``(p_w, mu)``. Targets that form a degenerate pair with the anchor come
    back invalid (NaN).
    """
    p_w1, mu1, gamma1 = anchor
    if gamma1 == 0:
        raise ValueError("anchor structure must be nonzero")
    out = np.full(len(targets), np.nan)
    valid = np.zeros(len(targets), dtype=bool)
    for i, (p_w, mu) in enumerate(targets):
        try:
            out[i] = gamma1 * relative_structure(mu1, mu, p_w1, p_w)
            valid[i] = True
        except DegeneratePair:
            pass
    return Propagated(out, valid)


def ray_plane_term(plane: ReferencePlane, K: CameraIntrinsics, p) -> np.ndarray | float:
    """``n . K^-1 (u, v, 1)`` for pixel(s) ``p``."""
    val = unproject_ray(K, p) @ plane.normal
    return float(val) if np.ndim(val) == 0 else val


def structure_to_depth(gamma, plane: ReferencePlane, K: CameraIntrinsics, p):
    """Depth ``Z = D / (n . K^-1 p - gamma)`` in the frame ``plane`` is expressed in.

    Follows from ``n . (Z K^-1 p) = D + H`` with ``H = gamma Z``.
    """
    denom = ray_plane_term(plane, K, p) - np.asarray(gamma, dtype=float)
    if np.ndim(denom) == 0:
        if not denom > 0:
            raise BehindPlaneHorizon("ray does not meet the plane-consistent depth")
        return plane.distance / float(denom)
    with np.errstate(divide="ignore"):
        Z = plane.distance / denom
    return np.where(denom > 0, Z, np.nan)


def depth_to_structure(Z, plane: ReferencePlane, K: CameraIntrinsics, p):
    Z = np.asarray(Z, dtype=float)
    if np.any(Z <= 0):
        raise ValueError("depth must be positive")
    gamma = (ray_plane_term(plane, K, p) * Z - plane.distance) / Z
    return float(gamma) if np.ndim(gamma) == 0 else gamma


def epipole_exclusion_mask(grid_size, e, radius_px: float) -> np.ndarray:
    """Boolean (height, width) grid, True where the pixel is closer than ``radius_px`` to ``e``."""
    if radius_px < 0:
        raise ValueError("radius must be nonnegative")
    width, height = grid_size
    e = _epipole_point(e) if not (isinstance(e, Epipole) and e.at_infinity) else None
    if e is None:
        return np.zeros((height, width), dtype=bool)
    v, u = np.mgrid[0:height, 0:width]
    return (u - e[0]) ** 2 + (v - e[1]) ** 2 < radius_px ** 2


@dataclass
class StructureSamples:
    """Per-match structure, aligned with the input correspondences."""

    pixels: np.ndarray
    p_w: np.ndarray
    gamma: np.ndarray
    valid: np.ndarray
    reason: np.ndarray
    residual: np.ndarray


def structure_samples(matches: CorrespondenceSet, H: PlanarHomography, e: Epipole, k_scale: float,
                      exclusion_radius: float = EPIPOLE_RADIUS_PX,
                      min_parallax: float = MIN_PARALLAX_PX,
                      gamma_range=GAMMA_RANGE) -> StructureSamples:
    """Vectorized projective structure for every match.

    A match is invalid when it is dynamic, when its warped point lies within
    ``exclusion_radius`` of the epipole, when its image displacement is below
    ``min_parallax`` (no motion signal), or when ``gamma`` falls outside
    ``gamma_range`` (value kept, flagged).
    """
    if k_scale == 0:
        raise ValueError("k_scale = T_Z / D must be nonzero")
    ep = _epipole_point(e)
    p_w = warp(H, matches.p_b)
    ray = p_w - ep
    dist2 = np.einsum("ij,ij->i", ray, ray)
    d = matches.p_a - p_w
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.einsum("ij,ij->i", d, ray) / (k_scale * dist2)
        residual = (d[:, 0] * ray[:, 1] - d[:, 1] * ray[:, 0]) / np.sqrt(dist2)
    reason = np.full(len(matches), VALID, dtype=np.int8)
    if gamma_range is not None:
        lo, hi = gamma_range
        reason[~((gamma >= lo) & (gamma <= hi))] = OUT_OF_RANGE
    flow = np.linalg.norm(matches.p_b - matches.p_a, axis=1)
    reason[flow < min_parallax] = NO_MOTION
    reason[dist2 < exclusion_radius ** 2] = NEAR_EPIPOLE
    reason[~matches.is_static] = DYNAMIC
    valid = reason == VALID
    gamma = np.where(reason == NEAR_EPIPOLE, np.nan, gamma)
    return StructureSamples(matches.p_a.copy(), p_w, gamma, valid, reason, residual)


@dataclass(eq=False)
class StructureMap:
    """Dense grid of ``gamma = H / Z``; cells without a sample are invalid (NaN)."""

    values: np.ndarray
    valid: np.ndarray
    epipole: Epipole | None = None
    k_scale: float = float("nan")
    out_of_range: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape


@dataclass(eq=False)
class DepthMap:
    values: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def from_values(cls, values, valid=None, depth_range=DEPTH_RANGE) -> "DepthMap":
        values = np.asarray(values, dtype=float)
        ok = np.isfinite(values) & (values >= depth_range[0]) & (values <= depth_range[1])
        if valid is not None:
            ok &= np.asarray(valid, dtype=bool)
        return cls(np.where(ok, values, np.nan), ok)


def pixel_index(pixels: np.ndarray, grid_size):
    """Nearest grid cell of each pixel and whether it falls inside the grid."""
    width, height = grid_size
    cols = np.floor(pixels[:, 0] + 0.5).astype(np.int64)
    rows = np.floor(pixels[:, 1] + 0.5).astype(np.int64)
    inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    return rows, cols, inside


def _last_writer_scatter(rows, cols, payload, shape, fill):
    # numpy does not promise "last wins" for duplicate indices; resolve explicitly
    flat = rows * shape[1] + cols
    order = np.arange(len(flat))
    last = np.full(shape[0] * shape[1], -1, dtype=np.int64)
    np.maximum.at(last, flat, order)
    out = np.full(shape[0] * shape[1], fill, dtype=payload.dtype)
    hit = last >= 0
    out[hit] = payload[last[hit]]
    return out.reshape(shape)


def splat(pixels, values, valid, grid_size):
    """Nearest-pixel rasterization with deterministic last-writer-wins.

    Returns ``(grid, valid_grid, writer_index)`` where ``writer_index`` holds
    the index of the match that owns each cell, or -1.
    """
    width, height = grid_size
    shape = (height, width)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    rows, cols, inside = pixel_index(pixels, grid_size)
    sel = np.flatnonzero(inside)
    owner = _last_writer_scatter(rows[sel], cols[sel], sel.astype(np.int64), shape, -1)
    grid = np.full(shape, np.nan)
    ok = np.zeros(shape, dtype=bool)
    hit = owner >= 0
    vals = np.asarray(values, dtype=float)
    val_ok = np.asarray(valid, dtype=bool)
    ok[hit] = val_ok[owner[hit]]
    grid[ok] = vals[owner[ok]]
    return grid, ok, owner


def structure_map(matches: CorrespondenceSet, H: PlanarHomography, e: Epipole, k_scale: float,
                  grid_size=None, exclusion_radius: float = EPIPOLE_RADIUS_PX,
                  min_parallax: float = MIN_PARALLAX_PX, gamma_range=GAMMA_RANGE) -> StructureMap:
    """Rasterize per-match ``gamma`` at ``round(p_a)``; no interpolation."""
    grid_size = tuple(grid_size or matches.image_size)
    s = structure_samples(matches, H, e, k_scale, exclusion_radius, min_parallax, gamma_range)
    values, valid, owner = splat(s.pixels, s.gamma, s.valid, grid_size)
    hit = owner >= 0
    oor = np.zeros(values.shape, dtype=bool)
    oor[hit] = s.reason[owner[hit]] == OUT_OF_RANGE
    excluded = epipole_exclusion_mask(grid_size, e, exclusion_radius)
    valid &= ~excluded
    values[~valid] = np.nan
    return StructureMap(values, valid, e, float(k_scale), oor)


def structure_map_to_depth(smap: StructureMap, plane_a: ReferencePlane, K: CameraIntrinsics,
                           depth_range=DEPTH_RANGE) -> DepthMap:
    """Convert a structure grid to depth at the cell centres."""
    h, w = smap.shape
    v, u = np.mgrid[0:h, 0:w]
    pix = np.stack([u, v], axis=-1).astype(float)
    Z = structure_to_depth(np.where(smap.valid, smap.values, 0.0), plane_a, K, pix)
    return DepthMap.from_values(Z, smap.valid, depth_range)


def samples_to_depth(samples: StructureSamples, plane_a: ReferencePlane, K: CameraIntrinsics):
    """Per-match depth at the exact match positions; invalid where the ray misses."""
    gamma = np.where(samples.valid, samples.gamma, 0.0)
    Z = structure_to_depth(gamma, plane_a, K, samples.pixels)
    valid = samples.valid & np.isfinite(Z) & (Z > 0)
    return np.where(valid, Z, np.nan), valid
