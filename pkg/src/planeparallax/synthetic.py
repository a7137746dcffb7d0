"""Deterministic two-view scenes with exact ground truth.

A scene is a reference plane, boxes standing on it, optional free-floating
and independently moving points, and a rigid camera motion from frame b
(previous) to frame a (current). Every match is the exact projection of a
known 3D point, so homography, epipole, structure and depth are all known in
closed form. Noise and outliers touch only the correspondence list.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileio
from .errors import InfeasibleConfig
from .geometry import (CameraIntrinsics, PlanarHomography, ReferencePlane, RigidPose,
                       calibrated_homography, plane_height, plane_in_frame,
                       plane_induced_homography, project, rotation_about, unproject_ray, warp,
                       write_intrinsics, write_pose)
from .homography import CorrespondenceSet, Epipole, write_correspondences
from .parallax import DepthMap, StructureMap, splat

logger = logging.getLogger(__name__)

KIND_PLANE, KIND_BOX, KIND_FREE, KIND_DYNAMIC = 0, 1, 2, 3
KIND_NAMES = {KIND_PLANE: "plane", KIND_BOX: "box", KIND_FREE: "free", KIND_DYNAMIC: "dynamic"}


@dataclass(frozen=True)
class Box:
    """Box resting on the plane.

    ``x``, ``z`` place the bottom centre (frame-b lateral and forward
    coordinates, the vertical one is solved on the plane); ``width`` runs
    along the plane's right axis, ``length`` along its forward axis.
    """

    x: float
    z: float
    width: float
    height: float
    length: float


@dataclass(frozen=True)
class DynamicPoint:
    position: tuple  # frame-b position at time b (meters)
    displacement: tuple  # own motion between the frames, frame-b axes (meters)


def _default_boxes():
    return (Box(-3.2, 11.0, 1.8, 1.5, 4.2), Box(2.8, 16.0, 1.8, 1.4, 4.5),
            Box(-2.6, 24.0, 2.0, 1.2, 3.0), Box(4.5, 30.0, 2.2, 1.8, 5.0))


@dataclass(frozen=True)
class SceneConfig:
    """Scene parameters; defaults mimic a KITTI frame pair at 640x192."""

    width: int = 640
    height: int = 192
    fx: float = 371.5
    fy: float = 369.5
    cx: float = 318.5
    cy: float = 92.25
    plane_normal: tuple = (0.0, 1.0, 0.0)
    plane_distance: float = 1.5
    n_plane_points: int = 200
    n_offplane_points: int = 200
    boxes: tuple = field(default_factory=_default_boxes)
    rotation: tuple = (0.004, 0.008, 0.002)  # axis-angle, radians
    camera_motion: tuple = (0.05, 0.0, 1.0)  # frame-a centre in frame-b coordinates
    dynamic_points: tuple = ()
    label_dynamic: bool = True
    noise_px: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0
    min_depth: float = 3.0
    max_depth: float = 80.0

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    @property
    def plane(self) -> ReferencePlane:
        return ReferencePlane.from_normal(self.plane_normal, self.plane_distance)

    @property
    def pose(self) -> RigidPose:
        """Frame b to frame a. ``camera_motion`` is where camera a sits in frame b."""
        r = np.asarray(self.rotation, dtype=float)
        angle = float(np.linalg.norm(r))
        R = np.eye(3) if angle == 0 else rotation_about(r, angle)
        c = np.asarray(self.camera_motion, dtype=float)
        return RigidPose(R, -R @ c)

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.width, self.height)


CONFIG_KEYS = {
    "width": int, "height": int, "fx": float, "fy": float, "cx": float, "cy": float,
    "plane_distance": float, "n_plane_points": int, "n_offplane_points": int,
    "noise_px": float, "outlier_fraction": float, "seed": int, "min_depth": float,
    "max_depth": float,
}


def _floats(text: str, n: int | None = None) -> tuple:
    vals = tuple(float(v) for v in text.replace(",", " ").split())
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {text!r}")
    return vals


def parse_config(items: dict[str, str]) -> SceneConfig:
    """Build a config from key=value pairs; unknown keys are an error.

    Vector keys: ``plane_normal``, ``rotation``, ``camera_motion`` (3 numbers);
    ``boxes`` as ``x z width height length`` groups separated by ``;`` (``none``
    for no boxes); ``dynamic_points`` as ``px py pz dx dy dz`` groups.
    """
    kwargs = {}
    for key, value in items.items():
        if key in CONFIG_KEYS:
            kwargs[key] = CONFIG_KEYS[key](value)
        elif key in ("plane_normal", "rotation", "camera_motion"):
            kwargs[key] = _floats(value, 3)
        elif key == "boxes":
            groups = [g for g in value.split(";") if g.strip()]
            kwargs[key] = () if value.strip().lower() == "none" else tuple(
                Box(*_floats(g, 5)) for g in groups)
        elif key == "dynamic_points":
            groups = [g for g in value.split(";") if g.strip()]
            pts = []
            for g in groups:
                v = _floats(g, 6)
                pts.append(DynamicPoint(v[:3], v[3:]))
            kwargs[key] = tuple(pts)
        elif key == "label_dynamic":
            kwargs[key] = value.strip().lower() in ("1", "true", "yes")
        else:
            raise ValueError(f"unknown scene config key {key!r}")
    return SceneConfig(**kwargs)


def read_config(path) -> SceneConfig:
    return parse_config(fileio.read_keyvalue(path))


def config_items(cfg: SceneConfig) -> dict[str, str]:
    f = fileio.fmt
    items = {k: str(getattr(cfg, k)) if t is int else f(getattr(cfg, k)) for k, t in CONFIG_KEYS.items()}
    for key in ("plane_normal", "rotation", "camera_motion"):
        items[key] = " ".join(f(v) for v in getattr(cfg, key))
    items["boxes"] = "; ".join(" ".join(f(v) for v in (b.x, b.z, b.width, b.height, b.length))
                               for b in cfg.boxes) or "none"
    items["dynamic_points"] = "; ".join(" ".join(f(v) for v in (*d.position, *d.displacement))
                                        for d in cfg.dynamic_points)
    items["label_dynamic"] = "1" if cfg.label_dynamic else "0"
    return items


def write_config(path, cfg: SceneConfig) -> None:
    fileio.write_keyvalue(path, config_items(cfg))


@dataclass(eq=False)
class OracleScene:
    config: SceneConfig
    correspondences: CorrespondenceSet
    exact: CorrespondenceSet
    true_homography: PlanarHomography
    true_epipole: Epipole
    true_pose: RigidPose
    plane: ReferencePlane  # frame b
    points_b: np.ndarray  # 3D position at time b, frame b
    points_a: np.ndarray  # 3D position at time a, frame a
    kind: np.ndarray
    heights: np.ndarray
    outliers: np.ndarray
    true_structure: StructureMap = None
    true_depth: DepthMap = None

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.config.intrinsics

    @property
    def plane_a(self) -> ReferencePlane:
        return plane_in_frame(self.plane, self.true_pose)

    @property
    def depth_a(self) -> np.ndarray:
        return self.points_a[:, 2]

    @property
    def depth_b(self) -> np.ndarray:
        return self.points_b[:, 2]

    @property
    def gamma(self) -> np.ndarray:
        return self.heights / self.depth_a

    @property
    def k_scale(self) -> float:
        """``T_Z / D_b``."""
        return float(self.true_pose.translation[2] / self.plane.distance)

    @property
    def translation_px(self) -> np.ndarray:
        return self.intrinsics.K @ self.true_pose.translation

    @property
    def on_plane(self) -> np.ndarray:
        return self.kind == KIND_PLANE

    def plane_mask(self) -> np.ndarray:
        """Source-frame pixels of plane matches, standing in for a road segmentation."""
        return self.class_mask(KIND_PLANE, frame="b")

    def class_mask(self, kind: int, frame: str = "a") -> np.ndarray:
        pixels = self.exact.p_a if frame == "a" else self.exact.p_b
        _, ok, _ = splat(pixels, np.zeros(len(self.kind)), self.kind == kind, self.config.image_size)
        return ok


def _plane_basis(n: np.ndarray):
    # right / forward axes spanning the plane; "up" is -n
    forward = np.array([0.0, 0.0, 1.0]) - n[2] * n
    if np.linalg.norm(forward) < 1e-9:
        forward = np.array([1.0, 0.0, 0.0]) - n[0] * n
    forward /= np.linalg.norm(forward)
    right = np.cross(n, forward)
    right /= np.linalg.norm(right)
    return right, forward


def _box_frame(box: Box, plane: ReferencePlane):
    n = plane.normal
    right, forward = _plane_basis(n)
    if abs(n[1]) < 1e-9:
        raise InfeasibleConfig("boxes need a plane whose normal has a vertical component")
    y = (plane.distance - n[0] * box.x - n[2] * box.z) / n[1]
    base = np.array([box.x, y, box.z])
    return base, right, forward, -n


def _sample_box_surface(box: Box, plane: ReferencePlane, rng, count: int) -> np.ndarray:
    base, right, forward, up = _box_frame(box, plane)
    w, h, l = box.width, box.height, box.length
    faces = [  # (area, sampler)
        (w * h, lambda a, b: (a - 0.5) * w * right + b * h * up - 0.5 * l * forward),
        (w * h, lambda a, b: (a - 0.5) * w * right + b * h * up + 0.5 * l * forward),
        (l * h, lambda a, b: -0.5 * w * right + b * h * up + (a - 0.5) * l * forward),
        (l * h, lambda a, b: 0.5 * w * right + b * h * up + (a - 0.5) * l * forward),
        (w * l, lambda a, b: (a - 0.5) * w * right + h * up + (b - 0.5) * l * forward),
    ]
    areas = np.array([f[0] for f in faces])
    which = rng.choice(len(faces), size=count, p=areas / areas.sum())
    ab = rng.random((count, 2))
    return np.array([base + faces[k][1](a, b) for k, (a, b) in zip(which, ab)]).reshape(-1, 3)


class _Placer:
    """Accepts candidate points visible in both frames at distinct target pixels."""

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        self.K = cfg.intrinsics
        self.pose = cfg.pose
        self.used_a: set[tuple[int, int]] = set()
        self.used_b: set[tuple[int, int]] = set()
        self.points_b: list[np.ndarray] = []
        self.points_a: list[np.ndarray] = []
        self.kinds: list[int] = []

    def _inside(self, p) -> bool:
        w, h = self.cfg.image_size
        return 0.0 <= p[0] <= w - 1 and 0.0 <= p[1] <= h - 1

    def try_add(self, P_b, kind: int, P_b_at_a=None) -> bool:
        P_b = np.asarray(P_b, dtype=float)
        moved = P_b if P_b_at_a is None else np.asarray(P_b_at_a, dtype=float)
        P_a = self.pose.apply(moved)
        lo, hi = self.cfg.min_depth, self.cfg.max_depth
        if not (lo <= P_b[2] <= hi and lo <= P_a[2] <= hi):
            return False
        p_b = project(self.K, P_b)
        p_a = project(self.K, P_a)
        if not (self._inside(p_b) and self._inside(p_a)):
            return False
        # one match per rounded pixel in each frame keeps rasterized truth unambiguous
        key_a = (int(np.floor(p_a[0] + 0.5)), int(np.floor(p_a[1] + 0.5)))
        key_b = (int(np.floor(p_b[0] + 0.5)), int(np.floor(p_b[1] + 0.5)))
        if key_a in self.used_a or key_b in self.used_b:
            return False
        self.used_a.add(key_a)
        self.used_b.add(key_b)
        self.points_b.append(moved)
        self.points_a.append(P_a)
        self.kinds.append(kind)
        return True


def _fill(placer: _Placer, sampler, count: int, kind: int, rng, what: str) -> None:
    accepted = 0
    attempts = 0
    budget = 200 * max(count, 1) + 1000
    while accepted < count:
        if attempts >= budget:
            raise InfeasibleConfig(f"could only place {accepted}/{count} {what} points in both views")
        batch = sampler(rng, min(4 * (count - accepted), 4096))
        for P in batch:
            attempts += 1
            if placer.try_add(P, kind):
                accepted += 1
                if accepted == count:
                    break


def generate_scene(cfg: SceneConfig) -> OracleScene:
    """Sample a scene, project it exactly, then perturb a copy of the matches."""
    rng = np.random.default_rng(cfg.seed)
    K = cfg.intrinsics
    plane = cfg.plane
    pose = cfg.pose
    placer = _Placer(cfg)

    def plane_sampler(rng, n):
        pix = rng.random((n, 2)) * [cfg.width - 1, cfg.height - 1]
        rays = unproject_ray(K, pix)
        denom = rays @ plane.normal
        ok = denom > 1e-9
        return rays[ok] * (plane.distance / denom[ok])[:, None]

    # fixed points go first so sampled ones cannot take their pixels
    for dyn in cfg.dynamic_points:
        P = np.asarray(dyn.position, dtype=float)
        placed = placer.try_add(P, KIND_DYNAMIC, P + np.asarray(dyn.displacement, dtype=float))
        if not placed:
            raise InfeasibleConfig(f"dynamic point {dyn.position} is not visible in both views")
        # frame-b observation is of the point before it moved
        placer.points_b[-1] = P

    _fill(placer, plane_sampler, cfg.n_plane_points, KIND_PLANE, rng, "plane")

    if cfg.n_offplane_points:
        if cfg.boxes:
            areas = np.array([2 * b.height * (b.width + b.length) + b.width * b.length
                              for b in cfg.boxes])
            weights = areas / areas.sum()

            def box_sampler(rng, n):
                which = rng.choice(len(cfg.boxes), size=n, p=weights)
                return np.vstack([_sample_box_surface(cfg.boxes[k], plane, rng, int((which == k).sum()))
                                  for k in range(len(cfg.boxes))])

            _fill(placer, box_sampler, cfg.n_offplane_points, KIND_BOX, rng, "box")
        else:
            def free_sampler(rng, n):
                on = plane_sampler(rng, n)
                lift = rng.uniform(0.3, 3.0, size=len(on))
                return on - lift[:, None] * plane.normal

            _fill(placer, free_sampler, cfg.n_offplane_points, KIND_FREE, rng, "free")

    if not placer.points_b:
        raise InfeasibleConfig("scene has no points")
    points_b = np.array(placer.points_b)
    points_a = np.array(placer.points_a)
    kind = np.array(placer.kinds, dtype=np.int8)
    p_b = project(K, points_b)
    p_a = project(K, points_a)
    static = np.ones(len(kind), dtype=bool)
    if cfg.label_dynamic:
        static = kind != KIND_DYNAMIC
    exact = CorrespondenceSet(p_b, p_a, static, cfg.image_size)

    # height of the point where frame a sees it (equal to frame b for static points)
    plane_a = plane_in_frame(plane, pose)
    heights = plane_height(plane_a, points_a)

    noisy, outliers = _perturb(exact, cfg.noise_px, cfg.outlier_fraction, rng)
    scene = OracleScene(
        config=cfg,
        correspondences=noisy,
        exact=exact,
        true_homography=plane_induced_homography(K, pose, plane),
        true_epipole=Epipole.from_translation(K, pose.translation),
        true_pose=pose,
        plane=plane,
        points_b=points_b,
        points_a=points_a,
        kind=kind,
        heights=heights,
        outliers=outliers,
    )
    scene.true_depth, scene.true_structure = ground_truth_maps(scene)
    return scene


def ground_truth_maps(scene: OracleScene) -> tuple[DepthMap, StructureMap]:
    """Depth ``Z_a`` and structure ``H / Z_a`` splatted at the exact target pixels."""
    grid = scene.config.image_size
    ok = np.ones(len(scene.kind), dtype=bool)
    depth, dvalid, _ = splat(scene.exact.p_a, scene.depth_a, ok, grid)
    gamma, gvalid, _ = splat(scene.exact.p_a, scene.gamma, ok, grid)
    return (DepthMap(depth, dvalid),
            StructureMap(gamma, gvalid, scene.true_epipole, scene.k_scale,
                         np.zeros_like(gvalid)))


def _perturb(matches: CorrespondenceSet, noise_px: float, outlier_fraction: float, rng):
    if noise_px < 0:
        raise ValueError("noise must be nonnegative")
    if not 0 <= outlier_fraction < 1:
        raise ValueError("outlier fraction must lie in [0, 1)")
    n = len(matches)
    p_a = matches.p_a.copy()
    if noise_px > 0:
        p_a = p_a + rng.normal(0.0, noise_px, size=p_a.shape)
    outliers = np.zeros(n, dtype=bool)
    n_out = int(round(outlier_fraction * n))
    if n_out:
        idx = rng.choice(n, size=n_out, replace=False)
        w, h = matches.image_size
        p_a[idx] = rng.random((n_out, 2)) * [w - 1, h - 1]
        outliers[idx] = True
    return CorrespondenceSet(matches.p_b.copy(), p_a, matches.is_static.copy(),
                             matches.image_size), outliers


def perturb(scene: OracleScene, noise_px: float, outlier_fraction: float, seed: int,
            return_outliers: bool = False):
    """Noisy copy of the scene's exact matches.

    Gaussian noise of ``noise_px`` per coordinate is added to every ``p_a``,
    then exactly ``round(outlier_fraction * n)`` randomly chosen matches get a
    uniformly random ``p_a`` inside the image.
    """
    noisy, outliers = _perturb(scene.exact, noise_px, outlier_fraction, np.random.default_rng(seed))
    return (noisy, outliers) if return_outliers else noisy


def self_check(scene: OracleScene) -> dict:
    """Recompute the closed-form relations the scene must satisfy; returns max errors."""
    K = scene.intrinsics
    pose = scene.true_pose
    plane = scene.plane
    exact = scene.exact
    rigid = scene.kind != KIND_DYNAMIC
    on = scene.on_plane
    off = rigid & ~on
    H = scene.true_homography
    p_w = warp(H, exact.p_b)

    checks = {}
    checks["plane_warp_px"] = float(np.abs(p_w[on] - exact.p_a[on]).max()) if on.any() else 0.0
    if off.any():
        # gamma k (p_w - e) written as gamma (T_Z p_w - T_xy) / D stays finite when T_Z = 0
        T = scene.translation_px
        pred = p_w[off] + scene.gamma[off, None] * (T[2] * p_w[off] - T[:2]) / plane.distance
        checks["parallax_equation_px"] = float(np.abs(pred - exact.p_a[off]).max())
    else:
        checks["parallax_equation_px"] = 0.0
    # depth ratio through the third row of the unnormalized homography
    A = K.K @ calibrated_homography(pose, plane) @ K.K_inv
    pb_h = np.column_stack([exact.p_b, np.ones(len(exact))])
    T_Z = pose.translation[2]
    Zb = scene.depth_b[rigid]
    Hgt = scene.heights[rigid]
    ratio = pb_h[rigid] @ A[2] - Hgt * T_Z / (plane.distance * Zb)
    checks["depth_ratio"] = float(np.abs(ratio - scene.depth_a[rigid] / Zb).max()) if rigid.any() else 0.0
    checks["gamma_min"] = float(scene.gamma[rigid].min())
    checks["gamma_max"] = float(scene.gamma[rigid].max())
    checks["passed"] = bool(checks["plane_warp_px"] < 1e-10 and checks["parallax_equation_px"] < 1e-10
                            and checks["depth_ratio"] < 1e-10)
    return checks


def save_scene(scene: OracleScene, out_dir) -> dict:
    """Write the scene to ``out_dir``; returns the manifest that was written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = scene.config
    write_config(out / "scene.cfg", cfg)
    write_correspondences(out / "correspondences.csv", scene.correspondences)
    write_correspondences(out / "correspondences_exact.csv", scene.exact)
    write_intrinsics(out / "intrinsics.txt", scene.intrinsics)
    fileio.write_matrix(out / "image_size.txt", [cfg.width, cfg.height])
    write_pose(out / "pose.txt", scene.true_pose)
    fileio.write_matrix(out / "plane.txt", np.append(scene.plane.normal, scene.plane.distance))
    fileio.write_matrix(out / "homography.txt", scene.true_homography.matrix)
    ep = scene.true_epipole
    fileio.write_matrix(out / "epipole.txt", [*ep.e, ep.t_z_sign])
    fileio.write_pfm(out / "depth.pfm", scene.true_depth.values)
    fileio.write_pfm(out / "structure.pfm", scene.true_structure.values)
    fileio.write_pgm(out / "plane_mask.pgm", scene.plane_mask())
    # class masks on the target grid for per-class evaluation
    fileio.write_pgm(out / "class_plane.pgm", scene.class_mask(KIND_PLANE))
    fileio.write_pgm(out / "class_box.pgm", scene.class_mask(KIND_BOX))
    fileio.write_sparse(out / "depth.csv", scene.exact.p_a, scene.depth_a, np.ones(len(scene.kind), bool))
    fileio.write_sparse(out / "structure.csv", scene.exact.p_a, scene.gamma, np.ones(len(scene.kind), bool))

    lines = ["u_a,v_a,depth_a,depth_b,height,gamma,kind,outlier"]
    f = fileio.fmt
    for i in range(len(scene.kind)):
        u, v = scene.exact.p_a[i]
        lines.append(",".join([f(u), f(v), f(scene.depth_a[i]), f(scene.depth_b[i]),
                               f(scene.heights[i]), f(scene.gamma[i]),
                               KIND_NAMES[int(scene.kind[i])], str(int(scene.outliers[i]))]))
    (out / "truth.csv").write_text("\n".join(lines) + "\n")

    manifest = {"n_matches": int(len(scene.kind)),
                "n_plane": int(scene.on_plane.sum()),
                "n_outliers": int(scene.outliers.sum()),
                "k_scale": scene.k_scale,
                "self_check": self_check(scene)}
    fileio.write_json(out / "manifest.json", manifest)
    return manifest


def zero_motion(cfg: SceneConfig) -> SceneConfig:
    return replace(cfg, rotation=(0.0, 0.0, 0.0), camera_motion=(0.0, 0.0, 0.0))


def load_truth(scene_dir):
    """Read ``truth.csv`` back as a dict of arrays."""
    with open(Path(scene_dir) / "truth.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {k: np.array([float(r[k]) for r in rows]) for k in
           ("u_a", "v_a", "depth_a", "depth_b", "height", "gamma")}
    out["kind"] = np.array([r["kind"] for r in rows])
    out["outlier"] = np.array([r["outlier"] == "1" for r in rows])
    return out


def manifest_text(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True)
