"""Command-line frontend: synth, estimate, structure, depth, eval and run.

Stages hand off through files. Exit codes: 0 success, 1 usage or config
error, 2 estimation failure, 3 no ego-motion, 4 evaluation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileio, pipeline, synthetic
from .decomposition import DecompositionCandidate
from .errors import (DegenerateConfiguration, DivergedRefinement, EmptyMask, InfeasibleConfig,
                     InsufficientInliers, NoEgoMotion, NonPositiveValue, NoParallax,
                     NoValidCandidate)
from .evaluation import (EvalPair, LossWeights, class_masked_metrics, depth_metrics, joint_loss)
from .geometry import (PlanarHomography, ReferencePlane, RigidPose,
                       read_intrinsics, read_pose, write_pose)
from .homography import MIN_PARALLAX_PX, CorrespondenceSet, Epipole, RansacParams, read_correspondences
from .parallax import EPIPOLE_RADIUS_PX, GAMMA_RANGE, epipole_exclusion_mask

logger = logging.getLogger("planeparallax")

EXIT_OK, EXIT_USAGE, EXIT_ESTIMATION, EXIT_NO_MOTION, EXIT_EVAL = 0, 1, 2, 3, 4
EXIT_CODES = (
    ((NoEgoMotion, NoParallax), EXIT_NO_MOTION),
    ((InsufficientInliers, DegenerateConfiguration, DivergedRefinement, NoValidCandidate),
     EXIT_ESTIMATION),
    ((EmptyMask, NonPositiveValue), EXIT_EVAL),
    ((InfeasibleConfig, ValueError, OSError), EXIT_USAGE),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the contract reserves 2 for estimation
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class PipelineConfig:
    correspondences: Path | None = None
    intrinsics: Path | None = None
    image_size: tuple[int, int] | None = None
    plane_mask: Path | None = None
    estimate_dir: Path | None = None
    pose: Path | None = None
    ransac: RansacParams = field(default_factory=RansacParams)
    epipole_radius: float = EPIPOLE_RADIUS_PX
    min_parallax: float = MIN_PARALLAX_PX
    gamma_range: tuple[float, float] = GAMMA_RANGE
    plane_distance: float = 1.5
    weights: LossWeights = field(default_factory=LossWeights)
    out: Path = Path("out")

    def validate(self) -> None:
        for name in ("correspondences", "intrinsics", "plane_mask", "pose"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise UsageError(f"{name} file not found: {path}")
        if self.estimate_dir is not None and not Path(self.estimate_dir).is_dir():
            raise UsageError(f"estimate directory not found: {self.estimate_dir}")
        if self.epipole_radius < 0 or self.min_parallax < 0:
            raise UsageError("radius and minimum parallax must be nonnegative")
        if not self.plane_distance > 0:
            raise UsageError("plane distance must be positive")
        if self.gamma_range[0] >= self.gamma_range[1]:
            raise UsageError("gamma range must be increasing")


def _add_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", type=Path, help="oracle directory supplying default input paths")
    p.add_argument("--correspondences", type=Path)
    p.add_argument("--intrinsics", type=Path)
    p.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"))
    p.add_argument("--plane-mask", type=Path, help="source-frame PGM of the reference plane")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ransac-threshold", type=float, default=1.0)
    p.add_argument("--ransac-iterations", type=int, default=2000)
    p.add_argument("--min-parallax", type=float, default=MIN_PARALLAX_PX)
    p.add_argument("--epipole-radius", type=float, default=EPIPOLE_RADIUS_PX)
    p.add_argument("--gamma-range", type=float, nargs=2, default=GAMMA_RANGE, metavar=("LO", "HI"))
    p.add_argument("--plane-distance", type=float, default=1.5,
                   help="source-frame camera height above the plane in meters")
    p.add_argument("--out", type=Path, required=True)


def _config_from_args(args) -> PipelineConfig:
    scene = getattr(args, "scene", None)
    if scene is not None and not Path(scene).is_dir():
        raise UsageError(f"scene directory not found: {scene}")

    def pick(explicit, name):
        if explicit is not None:
            return explicit
        if scene is not None and (Path(scene) / name).exists():
            return Path(scene) / name
        return None

    size = tuple(args.image_size) if getattr(args, "image_size", None) else None
    if size is None and scene is not None and (Path(scene) / "image_size.txt").exists():
        size = tuple(int(v) for v in fileio.read_matrix(Path(scene) / "image_size.txt").ravel())
    cfg = PipelineConfig(
        correspondences=pick(args.correspondences, "correspondences.csv"),
        intrinsics=pick(args.intrinsics, "intrinsics.txt"),
        image_size=size,
        plane_mask=pick(args.plane_mask, "plane_mask.pgm"),
        estimate_dir=getattr(args, "estimate", None),
        pose=getattr(args, "pose", None),
        ransac=RansacParams(max_iterations=args.ransac_iterations,
                            inlier_threshold=args.ransac_threshold, seed=args.seed),
        epipole_radius=args.epipole_radius,
        min_parallax=args.min_parallax,
        gamma_range=tuple(args.gamma_range),
        plane_distance=args.plane_distance,
        out=args.out,
    )
    if cfg.correspondences is None or cfg.intrinsics is None:
        raise UsageError("correspondences and intrinsics are required (or --scene)")
    cfg.validate()
    return cfg


def _load_inputs(cfg: PipelineConfig):
    K = read_intrinsics(cfg.intrinsics)
    mask = fileio.read_mask(cfg.plane_mask) if cfg.plane_mask else None
    size = cfg.image_size
    if size is None and mask is not None:
        size = (mask.shape[1], mask.shape[0])
    matches = read_correspondences(cfg.correspondences, size or (0, 0))
    if size is None:
        # no grid given; the smallest one holding every target pixel
        size = (int(np.floor(matches.p_a[:, 0].max() + 0.5)) + 1,
                int(np.floor(matches.p_a[:, 1].max() + 0.5)) + 1)
        matches = CorrespondenceSet(matches.p_b, matches.p_a, matches.is_static, size)
    return matches, K, mask, size


# ---------------------------------------------------------------- estimate files

def _write_estimate(out: Path, result: pipeline.EstimateResult, n: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_matrix(out / "homography.txt", result.homography.matrix)
    ep = result.epipole
    epi = [np.nan, np.nan, 0] if ep.at_infinity else [*ep.e, ep.t_z_sign]
    fileio.write_matrix(out / "epipole.txt", epi)
    lines = ["index,inlier"] + [f"{i},{int(v)}" for i, v in enumerate(result.ransac.inlier_mask)]
    (out / "inliers.csv").write_text("\n".join(lines) + "\n")
    hist = result.refinement.objective_history if result.refinement else []
    lines = ["iteration,objective"] + [f"{i},{fileio.fmt(v)}" for i, v in enumerate(hist)]
    (out / "refinement_log.csv").write_text("\n".join(lines) + "\n")
    sel = next(i for i, c in enumerate(result.candidates) if c is result.selected)
    fileio.write_json(out / "decomposition.json", {
        "candidates": [{"rotation": c.rotation.tolist(),
                        "scaled_translation": c.scaled_translation.tolist(),
                        "normal": None if c.normal is None else c.normal.tolist()}
                       for c in result.candidates],
        "selected": sel,
        "k_scale": result.k_scale,
        "recomposition_residual": result.recomposition,
    })
    fileio.write_json(out / "estimate.json", {
        "n_matches": n,
        "n_inliers": int(result.ransac.inlier_mask.sum()),
        "ransac_iterations": result.ransac.iterations,
        "refinement_iterations": result.refinement.iterations if result.refinement else 0,
        "objective_initial": hist[0] if hist else None,
        "objective_final": hist[-1] if hist else None,
    })


@dataclass
class LoadedEstimate:
    homography: PlanarHomography
    epipole: Epipole
    selected: DecompositionCandidate


def _read_estimate(d: Path) -> LoadedEstimate:
    H = PlanarHomography(fileio.read_matrix(d / "homography.txt"))
    u, v, sign = fileio.read_matrix(d / "epipole.txt").ravel()
    dec = json.loads((d / "decomposition.json").read_text())
    c = dec["candidates"][dec["selected"]]
    cand = DecompositionCandidate(np.array(c["rotation"]), np.array(c["scaled_translation"]),
                                  None if c["normal"] is None else np.array(c["normal"]))
    if not np.isfinite(u):
        ep = Epipole.infinite((1.0, 0.0))
    else:
        ep = Epipole(np.array([u, v]), int(sign))
    return LoadedEstimate(H, ep, cand)


def _estimate_or_load(cfg: PipelineConfig, matches, K, mask) -> LoadedEstimate:
    if cfg.estimate_dir is not None:
        return _read_estimate(Path(cfg.estimate_dir))
    r = pipeline.estimate(matches, K, cfg.ransac, mask, cfg.min_parallax)
    return LoadedEstimate(r.homography, r.epipole, r.selected)


# ---------------------------------------------------------------- commands

def cmd_estimate(cfg: PipelineConfig) -> int:
    matches, K, mask, _ = _load_inputs(cfg)
    result = pipeline.estimate(matches, K, cfg.ransac, mask, cfg.min_parallax)
    _write_estimate(Path(cfg.out), result, len(matches))
    logger.info("homography from %d inliers", result.ransac.inlier_mask.sum())
    return EXIT_OK


def _structure_samples(cfg, matches, est: LoadedEstimate):
    return pipeline.structure(matches, est.homography, est.epipole, est.selected.k_scale,
                              cfg.epipole_radius, cfg.min_parallax, cfg.gamma_range)


def cmd_structure(cfg: PipelineConfig) -> int:
    matches, K, mask, size = _load_inputs(cfg)
    est = _estimate_or_load(cfg, matches, K, mask)
    if est.selected.is_pure_rotation:
        raise NoEgoMotion("no translation in the estimate")
    samples = _structure_samples(cfg, matches, est)
    smap = pipeline.rasterize_structure(samples, size, est.epipole, est.selected.k_scale,
                                        cfg.epipole_radius)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_pfm(out / "structure.pfm", smap.values)
    fileio.write_pgm(out / "structure_valid.pgm", smap.valid)
    fileio.write_sparse(out / "structure.csv", samples.pixels, samples.gamma, samples.valid)
    vals = smap.values[smap.valid]
    fileio.write_json(out / "structure_summary.json", {
        "valid_fraction": float(smap.valid.mean()),
        "n_valid_pixels": int(smap.valid.sum()),
        "n_valid_matches": int(samples.valid.sum()),
        "n_out_of_range": int(smap.out_of_range.sum()),
        "gamma_min": float(vals.min()) if vals.size else None,
        "gamma_max": float(vals.max()) if vals.size else None,
        "epipole": None if est.epipole.at_infinity else est.epipole.e.tolist(),
        "k_scale": est.selected.k_scale,
    })
    return EXIT_OK


def cmd_depth(cfg: PipelineConfig, mode: str) -> int:
    matches, K, mask, size = _load_inputs(cfg)
    est = _estimate_or_load(cfg, matches, K, mask)
    if est.selected.is_pure_rotation:
        raise NoEgoMotion("no translation in the estimate")
    c = est.selected
    if cfg.pose is not None:
        pose = read_pose(cfg.pose)
    else:
        pose = RigidPose(c.rotation, c.scaled_translation * cfg.plane_distance)
    if mode == "structure":
        samples = _structure_samples(cfg, matches, est)
        plane_b = ReferencePlane.from_normal(c.normal, cfg.plane_distance)
        plane_a = plane_b.in_frame(pose)
        depth = pipeline.structure_route_depth(samples, plane_a, K)
        exclude = epipole_exclusion_mask(size, est.epipole, cfg.epipole_radius)
    else:
        depth = pipeline.infinity_route_depth(matches, K, pose, cfg.min_parallax)
        exclude = None
    dmap = pipeline.depth_grid(depth, size, exclude)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_pfm(out / "depth.pfm", dmap.values)
    fileio.write_pgm(out / "depth_valid.pgm", dmap.valid)
    fileio.write_sparse(out / "depth.csv", depth.pixels, depth.depth_a, depth.valid)
    write_pose(out / "pose_used.txt", pose)
    fileio.write_json(out / "depth_summary.json", {
        "mode": mode, "n_valid_pixels": int(dmap.valid.sum()),
        "n_valid_matches": int(depth.valid.sum())})
    return EXIT_OK


def _read_map(path: Path) -> np.ndarray:
    if path.suffix == ".csv":
        raise UsageError("evaluation reads PFM grids")
    return fileio.read_pfm(path).astype(float)


def cmd_eval(args) -> int:
    for p in [args.pred, args.gt] + [m.split("=", 1)[-1] for m in args.class_mask]:
        if not Path(p).is_file():
            raise UsageError(f"file not found: {p}")
    pred = _read_map(Path(args.pred))
    gt = _read_map(Path(args.gt))
    if pred.shape != gt.shape:
        raise UsageError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    pair = EvalPair.from_maps(pred, gt, clip=args.clip)
    report = {"all": depth_metrics(pair).to_dict()}
    for spec in args.class_mask:
        name, _, path = spec.rpartition("=")
        name = name or Path(path).stem
        m = fileio.read_mask(path)
        if m.shape != pair.mask.shape:
            raise UsageError(f"class mask {path} does not match the map size")
        report[name] = class_masked_metrics(pair, m).to_dict()
    if args.pred_structure and args.gt_structure:
        ps = _read_map(Path(args.pred_structure))
        gs = _read_map(Path(args.gt_structure))
        w = LossWeights.from_ratio(args.sd_ratio)
        mask_s = np.isfinite(ps) & np.isfinite(gs)
        loss = joint_loss(np.where(pair.mask, pair.predicted, 0.0),
                          np.where(pair.mask, pair.ground_truth, 0.0), ps, gs,
                          pair.mask, mask_s, w)
        report["joint_loss"] = {"total": loss.total, "loss_d": loss.loss_d, "loss_s": loss.loss_s,
                                "sd_ratio": args.sd_ratio, "empty_d": loss.empty_d,
                                "empty_s": loss.empty_s}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fileio.write_json(out, report)
    if args.diff_out:
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.where(pair.mask, np.abs(pair.predicted - pair.ground_truth) / pair.ground_truth,
                           np.nan)
        fileio.write_pfm(args.diff_out, rel)
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = synthetic.read_config(args.config) if args.config else synthetic.SceneConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    scene = synthetic.generate_scene(cfg)
    manifest = synthetic.save_scene(scene, args.out)
    if not manifest["self_check"]["passed"]:
        logger.error("oracle self-check failed: %s", manifest["self_check"])
        return EXIT_USAGE
    return EXIT_OK


def cmd_run(cfg: PipelineConfig, args) -> int:
    """All stages in sequence into ``out/{estimate,structure,depth_*,eval}``."""
    out = Path(cfg.out)
    cmd_estimate(replace(cfg, out=out / "estimate"))
    staged = replace(cfg, estimate_dir=out / "estimate")
    cmd_structure(replace(staged, out=out / "structure"))
    for mode in ("structure", "infinity"):
        cmd_depth(replace(staged, out=out / f"depth_{mode}"), mode)
    scene = getattr(args, "scene", None)
    if scene is not None and (Path(scene) / "depth.pfm").exists():
        for mode in ("structure", "infinity"):
            ns = argparse.Namespace(pred=out / f"depth_{mode}" / "depth.pfm", gt=Path(scene) / "depth.pfm",
                                    class_mask=[f"{n}={Path(scene) / f'class_{n}.pgm'}"
                                                for n in ("plane", "box")
                                                if (Path(scene) / f"class_{n}.pgm").exists()],
                                    pred_structure=out / "structure" / "structure.pfm",
                                    gt_structure=Path(scene) / "structure.pfm",
                                    sd_ratio=args.sd_ratio, clip=True,
                                    out=out / "eval" / f"{mode}.json", diff_out=None)
            cmd_eval(ns)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="planeparallax", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write an oracle scene directory")
    p.add_argument("--config", type=Path, help="key=value scene config (defaults if omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("estimate", help="homography, epipole and decomposition")
    _add_inputs(p)

    p = sub.add_parser("structure", help="projective structure map")
    _add_inputs(p)
    p.add_argument("--estimate", type=Path, help="directory written by 'estimate'")

    p = sub.add_parser("depth", help="depth map by the structure or plane-at-infinity route")
    _add_inputs(p)
    p.add_argument("--estimate", type=Path)
    p.add_argument("--mode", choices=("structure", "infinity"), default="structure")
    p.add_argument("--pose", type=Path, help="odometry [R|t] file; default from the decomposition")

    p = sub.add_parser("eval", help="depth metrics JSON")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--class-mask", action="append", default=[], metavar="[NAME=]PGM")
    p.add_argument("--pred-structure", type=Path)
    p.add_argument("--gt-structure", type=Path)
    p.add_argument("--sd-ratio", type=float, default=10.0)
    p.add_argument("--clip", action="store_true", help="clamp predictions to [0.1, 100] m")
    p.add_argument("--diff-out", type=Path, help="write the per-pixel relative error as PFM")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("run", help="estimate, structure, both depth routes and evaluation")
    _add_inputs(p)
    p.add_argument("--sd-ratio", type=float, default=10.0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help and usage errors; hand the status back instead of exiting
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "eval":
            return cmd_eval(args)
        cfg = _config_from_args(args)
        if args.command == "estimate":
            return cmd_estimate(cfg)
        if args.command == "structure":
            return cmd_structure(cfg)
        if args.command == "depth":
            return cmd_depth(cfg, args.mode)
        return cmd_run(cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        for types, code in EXIT_CODES:
            if isinstance(exc, types):
                print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
