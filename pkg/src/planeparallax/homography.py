"""Reference-plane homography from correspondences.

Normalized DLT, RANSAC with symmetric transfer error, least-squares epipole
from residual parallax lines, and a damped least-squares refinement that pulls
the residual parallax lines through the epipole.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (DegenerateConfiguration, DivergedRefinement, InsufficientInliers,
                     NoParallax)
from .fileio import fmt
from .geometry import CameraIntrinsics, PlanarHomography, homogeneous, warp

logger = logging.getLogger(__name__)

MIN_PARALLAX_PX = 0.25


@dataclass(frozen=True, eq=False)
class Correspondence:
    p_b: np.ndarray
    p_a: np.ndarray
    is_static: bool = True


@dataclass(eq=False)
class CorrespondenceSet:
    """Matches ``p_b -> p_a`` stored column-wise as arrays."""

    p_b: np.ndarray
    p_a: np.ndarray
    is_static: np.ndarray = None
    image_size: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.p_b = np.asarray(self.p_b, dtype=float).reshape(-1, 2)
        self.p_a = np.asarray(self.p_a, dtype=float).reshape(-1, 2)
        if self.p_b.shape != self.p_a.shape:
            raise ValueError("p_b and p_a must have the same number of points")
        if self.is_static is None:
            self.is_static = np.ones(len(self.p_b), dtype=bool)
        self.is_static = np.asarray(self.is_static, dtype=bool).reshape(-1)
        if not (np.all(np.isfinite(self.p_b)) and np.all(np.isfinite(self.p_a))):
            raise ValueError("correspondence coordinates must be finite")
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    @classmethod
    def from_items(cls, items: Iterable[Correspondence], image_size=(0, 0)) -> "CorrespondenceSet":
        items = list(items)
        return cls(np.array([m.p_b for m in items], dtype=float).reshape(-1, 2),
                   np.array([m.p_a for m in items], dtype=float).reshape(-1, 2),
                   np.array([m.is_static for m in items], dtype=bool),
                   image_size)

    def __len__(self) -> int:
        return len(self.p_b)

    def __getitem__(self, i) -> Correspondence:
        return Correspondence(self.p_b[i], self.p_a[i], bool(self.is_static[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, mask) -> "CorrespondenceSet":
        return CorrespondenceSet(self.p_b[mask], self.p_a[mask], self.is_static[mask],
                                 self.image_size)

    def static(self) -> "CorrespondenceSet":
        return self.subset(self.is_static)


def read_correspondences(path, image_size=(0, 0)) -> CorrespondenceSet:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["u_b", "v_b", "u_a", "v_a", "is_static"]
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: header must be {','.join(expected)}")
        rows = list(reader)
    p_b = [[float(r["u_b"]), float(r["v_b"])] for r in rows]
    p_a = [[float(r["u_a"]), float(r["v_a"])] for r in rows]
    static = [r["is_static"].strip().lower() in ("1", "true") for r in rows]
    return CorrespondenceSet(p_b, p_a, static, image_size)


def write_correspondences(path, matches: CorrespondenceSet) -> None:
    lines = ["u_b,v_b,u_a,v_a,is_static"]
    for pb, pa, s in zip(matches.p_b, matches.p_a, matches.is_static):
        lines.append(f"{fmt(pb[0])},{fmt(pb[1])},{fmt(pa[0])},{fmt(pa[1])},{int(s)}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True, eq=False)
class Epipole:
    """Epipole in the target image.

    ``t_z_sign`` is +1/-1 when the sign of the forward translation is known and
    0 when only the point is known (lines alone do not fix it). When
    ``at_infinity`` is set the lines were parallel and ``direction`` holds their
    common unit direction; ``e`` is then meaningless.
    """

    e: np.ndarray
    t_z_sign: int = 0
    at_infinity: bool = False
    direction: np.ndarray | None = None

    @classmethod
    def infinite(cls, direction) -> "Epipole":
        d = np.asarray(direction, dtype=float)
        return cls(np.full(2, np.nan), 0, True, d / np.linalg.norm(d))

    @classmethod
    def from_translation(cls, K: CameraIntrinsics, t, tz_eps: float = 1e-12) -> "Epipole":
        """Epipole ``K t / T_Z`` of a frame-b camera centre seen from frame a."""
        T = K.K @ np.asarray(t, dtype=float)
        if abs(T[2]) <= tz_eps * max(1.0, np.linalg.norm(T)):
            return cls.infinite(T[:2] if np.linalg.norm(T[:2]) > 0 else (1.0, 0.0))
        return cls(T[:2] / T[2], int(np.sign(T[2])))

    def with_sign(self, sign: int) -> "Epipole":
        return Epipole(self.e, int(np.sign(sign)), self.at_infinity, self.direction)


@dataclass(frozen=True)
class RansacParams:
    max_iterations: int = 2000
    inlier_threshold: float = 1.0
    confidence: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if not self.inlier_threshold > 0:
            raise ValueError("inlier threshold must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("need at least one RANSAC iteration")


def hartley_normalization(points: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    centroid = points.mean(axis=0)
    mean_dist = np.linalg.norm(points - centroid, axis=1).mean()
    if not mean_dist > 0:
        raise DegenerateConfiguration("all points coincide")
    s = math.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * centroid[0]],
                     [0.0, s, -s * centroid[1]],
                     [0.0, 0.0, 1.0]])


def _collinear_triple(pts: np.ndarray, tol: float = 1e-9) -> bool:
    # pts are normalized, so a signed area near zero means degenerate
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                d1 = pts[j] - pts[i]
                d2 = pts[k] - pts[i]
                if abs(d1[0] * d2[1] - d1[1] * d2[0]) < tol:
                    return True
    return False


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    n = len(src)
    if n < 4:
        raise DegenerateConfiguration(f"DLT needs at least 4 matches, got {n}")
    T_src = hartley_normalization(src)
    T_dst = hartley_normalization(dst)
    s = (homogeneous(src) @ T_src.T)[:, :2]
    d = (homogeneous(dst) @ T_dst.T)[:, :2]
    if n == 4 and (_collinear_triple(s) or _collinear_triple(d)):
        raise DegenerateConfiguration("three of the four points are collinear")
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    zeros = np.zeros(n)
    ones = np.ones(n)
    rows_u = np.stack([-x, -y, -ones, zeros, zeros, zeros, u * x, u * y, u], axis=1)
    rows_v = np.stack([zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v], axis=1)
    M = np.empty((2 * n, 9))
    M[0::2] = rows_u
    M[1::2] = rows_v
    _, sv, Vt = np.linalg.svd(M)
    # the solution is the last right singular vector; the second-smallest must be
    # clearly nonzero or the null space is not one-dimensional
    rank_gap = sv[7] if len(sv) > 7 else 0.0
    if rank_gap < 1e-10 * sv[0]:
        raise DegenerateConfiguration("homography system is rank deficient")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(T_dst) @ Hn @ T_src
    if abs(np.linalg.det(H / np.linalg.norm(H))) < 1e-14:
        raise DegenerateConfiguration("estimated homography is singular")
    return H


def dlt_homography(matches) -> PlanarHomography:
    """Algebraic least-squares homography with isotropic normalization of both sets.

    ``matches`` is a ``CorrespondenceSet`` or a sequence of ``Correspondence``.
    Four non-degenerate matches are interpolated exactly.
    """
    if not isinstance(matches, CorrespondenceSet):
        matches = CorrespondenceSet.from_items(matches)
    return PlanarHomography(_dlt(matches.p_b, matches.p_a))


def transfer_errors(H: PlanarHomography, p_b, p_a, H_inv: PlanarHomography | None = None) -> np.ndarray:
    """Vectorized symmetric transfer error: forward plus backward distance."""
    if H_inv is None:
        H_inv = H.inverse()
    fwd = np.linalg.norm(warp(H, p_b) - p_a, axis=-1)
    bwd = np.linalg.norm(warp(H_inv, p_a) - p_b, axis=-1)
    return fwd + bwd


def symmetric_transfer_error(H: PlanarHomography, m: Correspondence) -> float:
    return float(transfer_errors(H, m.p_b, m.p_a))


def _safe_transfer_errors(H: np.ndarray, src, dst) -> np.ndarray:
    # RANSAC hypotheses may send some points to infinity; those are outliers
    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return np.full(len(src), np.inf)
    qf = homogeneous(src) @ H.T
    qb = homogeneous(dst) @ Hinv.T
    with np.errstate(divide="ignore", invalid="ignore"):
        fwd = np.linalg.norm(qf[:, :2] / qf[:, 2:] - dst, axis=1)
        bwd = np.linalg.norm(qb[:, :2] / qb[:, 2:] - src, axis=1)
    err = fwd + bwd
    err[~np.isfinite(err)] = np.inf
    return err


def _required_iterations(inlier_ratio: float, confidence: float, sample_size: int = 4) -> float:
    if inlier_ratio >= 1.0:
        return 1.0
    if inlier_ratio <= 0.0:
        return math.inf
    p_good = inlier_ratio ** sample_size
    denom = math.log1p(-p_good)
    if denom == 0.0:
        return math.inf
    return math.log(1.0 - confidence) / denom


@dataclass
class RansacResult:
    homography: PlanarHomography
    inlier_mask: np.ndarray
    iterations: int


def ransac_homography(matches: CorrespondenceSet, params: RansacParams = RansacParams(),
                      use: np.ndarray | None = None) -> RansacResult:
    """Robust homography with adaptive termination, refit on all inliers.

    Only static matches (and, if given, those flagged in ``use``) take part;
    the returned mask is aligned with ``matches`` and is False elsewhere.
    Iteration ``i`` draws its sample from a generator seeded with
    ``(seed, i)``, so the result does not depend on evaluation order; ties in
    inlier count go to the lowest iteration index.
    """
    eligible = matches.is_static.copy()
    if use is not None:
        eligible &= np.asarray(use, dtype=bool)
    idx = np.flatnonzero(eligible)
    if len(idx) < 4:
        raise InsufficientInliers(f"need at least 4 static matches, got {len(idx)}")
    src = matches.p_b[idx]
    dst = matches.p_a[idx]
    n = len(idx)
    thr = params.inlier_threshold

    best_count = -1
    best_inliers = None
    needed = float(params.max_iterations)
    it = 0
    while it < min(params.max_iterations, needed):
        rng = np.random.default_rng([params.seed, it])
        sample = rng.choice(n, size=4, replace=False)
        it += 1
        try:
            H = _dlt(src[sample], dst[sample])
        except DegenerateConfiguration:
            continue
        inliers = _safe_transfer_errors(H, src, dst) < thr
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
            needed = _required_iterations(count / n, params.confidence)

    if best_inliers is None or best_count < 4:
        raise InsufficientInliers(f"best consensus has {max(best_count, 0)} inliers")

    inliers = best_inliers
    H = _dlt(src[inliers], dst[inliers])
    # re-score with the refit model; a few rounds settle the consensus set
    for _ in range(5):
        new_inliers = _safe_transfer_errors(H, src, dst) < thr
        if new_inliers.sum() < 4 or np.array_equal(new_inliers, inliers):
            break
        inliers = new_inliers
        H = _dlt(src[inliers], dst[inliers])

    mask = np.zeros(len(matches), dtype=bool)
    mask[idx[inliers]] = True
    logger.debug("RANSAC: %d/%d inliers after %d iterations", inliers.sum(), n, it)
    return RansacResult(PlanarHomography(H), mask, it)


def _perp(v: np.ndarray) -> np.ndarray:
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def estimate_epipole(p_w, p_a, min_parallax: float = MIN_PARALLAX_PX,
                     rank_tol: float = 1e-12) -> Epipole:
    """Least-squares intersection of the lines through each ``p_w`` and ``p_a``.

    Pairs whose residual parallax is below ``min_parallax`` carry no usable
    direction and are dropped.
    """
    p_w = np.asarray(p_w, dtype=float).reshape(-1, 2)
    p_a = np.asarray(p_a, dtype=float).reshape(-1, 2)
    mu = p_a - p_w
    length = np.linalg.norm(mu, axis=1)
    keep = length >= min_parallax
    if keep.sum() == 0:
        raise NoParallax("no residual parallax above the minimum; no ego-motion?")
    normals = _perp(mu[keep]) / length[keep, None]
    offsets = np.einsum("ij,ij->i", normals, p_w[keep])
    A = normals.T @ normals
    b = normals.T @ offsets
    evals, evecs = np.linalg.eigh(A)
    if keep.sum() < 2 or evals[0] <= rank_tol * evals[1]:
        # all lines share one normal; their common direction is perpendicular to it
        return Epipole.infinite(_perp(evecs[:, 1]))
    return Epipole(np.linalg.solve(A, b))


def epipole_line_distances(p_w, p_a, e) -> np.ndarray:
    """Distance from ``e`` to each line through ``p_w`` and ``p_a``."""
    d = np.asarray(p_a, dtype=float) - np.asarray(p_w, dtype=float)
    f = np.asarray(e, dtype=float) - np.asarray(p_w, dtype=float)
    cross = d[..., 0] * f[..., 1] - d[..., 1] * f[..., 0]
    return cross / np.linalg.norm(d, axis=-1)


def epipole_offsets(p_w, p_a, e) -> np.ndarray:
    """Distance of each ``p_a`` from the line through ``e`` and its ``p_w``.

    Unlike the line-to-epipole distance this does not grow with the distance
    from the epipole, so one pixel threshold suits every match.
    """
    ray = np.asarray(e, dtype=float) - np.asarray(p_w, dtype=float)
    d = np.asarray(p_a, dtype=float) - np.asarray(p_w, dtype=float)
    cross = d[..., 0] * ray[..., 1] - d[..., 1] * ray[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.abs(cross) / np.linalg.norm(ray, axis=-1)


@dataclass
class RobustEpipole:
    epipole: Epipole
    inlier_mask: np.ndarray
    iterations: int


def robust_epipole(p_w, p_a, threshold: float = 1.5, min_parallax: float = MIN_PARALLAX_PX,
                   max_iterations: int = 500, seed: int = 0, refit_rounds: int = 5) -> RobustEpipole:
    """Two-line sampling for the epipole followed by a refit on the inliers.

    Candidates are intersections of two sampled parallax lines, scored by
    the truncated squared ``epipole_offsets`` (MSAC). The winner is refit by
    damped Gauss-Newton on the offsets of its inliers; the inlier set is then
    re-selected at ``min(threshold, 3 sigma)`` with ``sigma`` a robust scale
    of the current offsets, and refit again. The returned mask is the set
    within ``threshold`` of the final point. The epipole carries no
    translation sign. Sampling follows the same seeding rule as
    ``ransac_homography``.
    """
    p_w = np.asarray(p_w, dtype=float).reshape(-1, 2)
    p_a = np.asarray(p_a, dtype=float).reshape(-1, 2)
    mu = p_a - p_w
    length = np.linalg.norm(mu, axis=1)
    idx = np.flatnonzero(length >= min_parallax)
    if len(idx) == 0:
        raise NoParallax("no residual parallax above the minimum; no ego-motion?")
    mask = np.zeros(len(p_w), dtype=bool)
    if len(idx) < 3:
        mask[idx] = True
        return RobustEpipole(estimate_epipole(p_w, p_a, min_parallax), mask, 0)
    pw, d = p_w[idx], mu[idx]
    normals = _perp(d) / length[idx, None]
    offsets = np.einsum("ij,ij->i", normals, pw)
    th2 = threshold ** 2
    best_cost, best_e = np.inf, None
    for it in range(max_iterations):
        rng = np.random.default_rng([seed, it])
        i, j = rng.choice(len(idx), size=2, replace=False)
        A = normals[[i, j]]
        if abs(np.linalg.det(A)) < 1e-6:
            continue
        e = np.linalg.solve(A, offsets[[i, j]])
        cost = float(np.minimum(epipole_offsets(pw, p_a[idx], e) ** 2, th2).sum())
        if cost < best_cost:
            best_cost, best_e = cost, e
    if best_e is None:
        # every sampled pair was parallel: no finite intersection exists
        mask[idx] = True
        return RobustEpipole(estimate_epipole(p_w, p_a, min_parallax), mask, max_iterations)

    e = best_e
    inl = epipole_offsets(pw, p_a[idx], e) < threshold
    for _ in range(refit_rounds):
        if inl.sum() < 3:
            break
        e = _fit_offsets(e, pw[inl], d[inl])
        r = epipole_offsets(pw, p_a[idx], e)
        sigma = 1.4826 * float(np.median(r[inl]))
        new = r < min(threshold, max(3.0 * sigma, 1e-9))
        if new.sum() < 3 or np.array_equal(new, inl):
            break
        inl = new
    mask[idx[epipole_offsets(pw, p_a[idx], e) < threshold]] = True
    return RobustEpipole(Epipole(e), mask, max_iterations)


def _offset_residuals(e, p_w, d):
    # signed distance of p_a = p_w + d from the line through p_w and e, and its gradient in e
    g = e - p_w
    n = np.linalg.norm(g, axis=1)
    r = (d[:, 0] * g[:, 1] - d[:, 1] * g[:, 0]) / n
    J = np.stack([-d[:, 1], d[:, 0]], axis=1) / n[:, None] - (r / n ** 2)[:, None] * g
    return r, J


def _fit_offsets(e, p_w, d, max_iterations: int = 50):
    """Damped Gauss-Newton for the point minimizing the squared offsets."""
    r, J = _offset_residuals(e, p_w, d)
    cost = float(r @ r)
    lam = 1e-6
    for _ in range(max_iterations):
        if cost == 0.0:
            break
        JtJ = J.T @ J
        g = J.T @ r
        try:
            step = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ) + 1e-12), -g)
        except np.linalg.LinAlgError:
            break
        e_new = e + step
        r_new, J_new = _offset_residuals(e_new, p_w, d)
        cost_new = float(r_new @ r_new)
        if np.isfinite(cost_new) and cost_new < cost:
            e, r, J, cost = e_new, r_new, J_new, cost_new
            lam = max(lam / 10.0, 1e-12)
            if np.linalg.norm(step) < 1e-12 * (1.0 + np.linalg.norm(e)):
                break
        else:
            lam *= 10.0
            if lam > 1e8:
                break
    return e


@dataclass
class RefinementResult:
    homography: PlanarHomography
    epipole: Epipole
    objective_history: list[float] = field(default_factory=list)
    iterations: int = 0
    used: np.ndarray | None = None

    @property
    def initial_objective(self) -> float:
        return self.objective_history[0]

    @property
    def final_objective(self) -> float:
        return self.objective_history[-1]


def _warp_jacobian(Hn, pb_n, s_a, c_a):
    """Warped pixels and their Jacobians w.r.t. the 9 row-major entries of ``Hn``.

    ``Hn`` acts on normalized source points ``pb_n`` (homogeneous) and produces
    normalized target points, mapped back to pixels by ``p = q / s_a + c_a``.
    """
    q = pb_n @ Hn.T
    w = q[:, 2]
    qn = q[:, :2] / w[:, None]
    p_w = qn / s_a + c_a
    scale = (1.0 / (s_a * w))[:, None]
    zeros = np.zeros_like(pb_n)
    Jx = np.hstack([pb_n * scale, zeros, -qn[:, :1] * pb_n * scale])
    Jy = np.hstack([zeros, pb_n * scale, -qn[:, 1:] * pb_n * scale])
    return p_w, Jx, Jy


def _line_residuals_and_jacobian(Hn, pb_n, pa, e, s_a, c_a, weights=None):
    """Signed epipole-to-line distances (pixels) and their Jacobian w.r.t. the 8 free entries."""
    p_w, Jx, Jy = _warp_jacobian(Hn, pb_n, s_a, c_a)
    d = pa - p_w
    f = e - p_w
    cross = d[:, 0] * f[:, 1] - d[:, 1] * f[:, 0]
    dn = np.linalg.norm(d, axis=1)
    r = cross / dn
    g = pa - e
    dr_dpw = np.stack([g[:, 1], -g[:, 0]], axis=1) / dn[:, None] + (cross / dn ** 3)[:, None] * d
    J = dr_dpw[:, :1] * Jx + dr_dpw[:, 1:] * Jy
    if weights is not None:
        r = r * weights
        J = J * weights[:, None]
    return r, J[:, :8]


def _anchor_residuals_and_jacobian(Hn, pb_n, pa, s_a, c_a):
    """Forward transfer residuals of plane matches, stacked x then y."""
    p_w, Jx, Jy = _warp_jacobian(Hn, pb_n, s_a, c_a)
    r = (p_w - pa).T.ravel()
    return r, np.vstack([Jx, Jy])[:, :8]


def refine_homography_parallax(H0: PlanarHomography, matches: CorrespondenceSet, e: Epipole,
                               use: np.ndarray | None = None,
                               min_parallax: float = MIN_PARALLAX_PX,
                               max_iterations: int = 100, step_tol: float = 1e-10,
                               reestimate_epipole: bool = False,
                               max_damping: float = 1e12,
                               anchors: np.ndarray | None = None,
                               anchor_weight: float = 0.1,
                               weighting: str = "none") -> RefinementResult:
    """Levenberg-style refinement of ``H0`` so residual parallax lines meet at ``e``.

    Minimizes the sum of squared distances from the epipole to the lines through
    ``warp(H, p_b)`` and ``p_a`` over the matches in ``use`` (default: static
    matches whose parallax under ``H0`` is at least ``min_parallax``). The
    bottom-right entry, in Hartley-normalized coordinates, stays fixed.
    Accepted steps never increase this objective; ``objective_history`` holds
    it after each accepted iteration, starting with the initial value.

    The line objective does not pin ``H`` down: composing ``H`` with any
    homology centred on ``e`` leaves every line in place, and maps that send
    all warped points onto ``e`` drive it to zero. ``anchors`` (a mask of
    plane matches, e.g. the RANSAC inliers) adds their forward transfer
    residuals, scaled by ``anchor_weight``, to the least-squares system; a
    step is then accepted when it lowers the combined cost without raising the
    line objective.

    With ``weighting="parallax"`` each distance is multiplied by the fixed
    factor ``|p_a - p_w0| / |p_a - e|`` (from ``H0``), which turns it into
    roughly the pixel misfit of ``p_a`` off its epipolar line. Unweighted
    distances of short parallax vectors are dominated by noise.
    """
    if weighting not in ("none", "parallax"):
        raise ValueError(f"unknown weighting {weighting!r}")
    if e.at_infinity or not np.all(np.isfinite(e.e)):
        raise ValueError("refinement needs a finite epipole")
    p_w0 = warp(H0, matches.p_b)
    if use is None:
        use = matches.is_static & (np.linalg.norm(matches.p_a - p_w0, axis=1) >= min_parallax)
    use = np.asarray(use, dtype=bool) & matches.is_static
    if use.sum() < 8:
        raise InsufficientInliers(f"refinement needs at least 8 parallax matches, got {use.sum()}")
    pb = matches.p_b[use]
    pa = matches.p_a[use]
    weights = None
    if weighting == "parallax":
        weights = (np.linalg.norm(pa - p_w0[use], axis=1)
                   / np.maximum(np.linalg.norm(pa - e.e, axis=1), 1e-12))

    T_b = hartley_normalization(pb)
    T_a = hartley_normalization(pa)
    s_a = T_a[0, 0]
    c_a = -T_a[:2, 2] / s_a
    pb_n = homogeneous(pb) @ T_b.T
    Hn = T_a @ H0.matrix @ np.linalg.inv(T_b)
    Hn = Hn / np.linalg.norm(Hn)
    if Hn[2, 2] < 0:
        Hn = -Hn
    h22 = Hn[2, 2]
    x = Hn.ravel()[:8].copy()
    epipole = e

    anchored = anchors is not None and bool(np.any(anchors))
    if anchored:
        anchors = np.asarray(anchors, dtype=bool) & matches.is_static
        anc_b = homogeneous(matches.p_b[anchors]) @ T_b.T
        anc_a = matches.p_a[anchors]

    def unpack(params):
        return np.append(params, h22).reshape(3, 3)

    def evaluate(params, ep):
        Hp = unpack(params)
        r, J = _line_residuals_and_jacobian(Hp, pb_n, pa, ep.e, s_a, c_a, weights)
        line = float(r @ r)
        if anchored:
            ra, Ja = _anchor_residuals_and_jacobian(Hp, anc_b, anc_a, s_a, c_a)
            r = np.concatenate([r, anchor_weight * ra])
            J = np.vstack([J, anchor_weight * Ja])
        return r, J, line, float(r @ r)

    r, J, line, cost = evaluate(x, epipole)
    history = [line]
    lam = 1e-3 * max(float(np.max(np.einsum("ij,ij->j", J, J))), 1e-300)
    it = 0
    while it < max_iterations:
        it += 1
        JtJ = J.T @ J
        g = J.T @ r
        converged = False
        while True:
            step = np.linalg.solve(JtJ + lam * np.eye(8), -g)
            if np.linalg.norm(step) < step_tol * (1.0 + np.linalg.norm(x)):
                converged = True
                break
            x_new = x + step
            with np.errstate(all="ignore"):
                r_new, J_new, line_new, cost_new = evaluate(x_new, epipole)
            if np.isfinite(cost_new) and cost_new < cost and line_new <= line:
                x, r, J, line, cost = x_new, r_new, J_new, line_new, cost_new
                history.append(line)
                lam = max(lam / 10.0, 1e-300)
                break
            lam *= 10.0
            if lam > max_damping * max(1.0, float(np.max(np.diag(JtJ)))):
                raise DivergedRefinement("damping cap reached without decreasing the objective")
        if converged:
            break
        if reestimate_epipole:
            p_w = unpack(x) @ pb_n.T
            p_w = (p_w[:2] / p_w[2]).T / s_a + c_a
            try:
                new_e = estimate_epipole(p_w, pa, min_parallax)
            except NoParallax:
                new_e = epipole
            if not new_e.at_infinity:
                candidate = new_e.with_sign(e.t_z_sign)
                r_new, J_new, line_new, cost_new = evaluate(x, candidate)
                # keep the new epipole only when it does not raise the objective
                if line_new <= line:
                    epipole, r, J, line, cost = candidate, r_new, J_new, line_new, cost_new
                    history.append(line)

    H = np.linalg.inv(T_a) @ unpack(x) @ T_b
    logger.debug("refinement: %d iterations, objective %.3g -> %.3g", it, history[0], history[-1])
    return RefinementResult(PlanarHomography(H), epipole, history, it, use)
