"""Depth metrics, the joint depth + structure loss and network output mappings."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyMask, NonPositiveValue
from .geometry import CameraIntrinsics, ReferencePlane
from .parallax import DEPTH_RANGE, GAMMA_RANGE, DepthMap, StructureMap, structure_map_to_depth

logger = logging.getLogger(__name__)

DEPTH_NEAR, DEPTH_FAR = DEPTH_RANGE
# 1/(a*sigma + b) with sigma=0 -> far and sigma=1 -> near
DISP_B = 1.0 / DEPTH_FAR
DISP_A = 1.0 / DEPTH_NEAR - DISP_B
QUALITY_REL = 0.5


@dataclass(frozen=True)
class MetricsReport:
    rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    silog: float
    n_evaluated: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossWeights:
    w_d: float = 1.0
    w_s: float = 10.0

    def __post_init__(self):
        if self.w_d < 0 or self.w_s < 0 or self.w_d + self.w_s <= 0:
            raise ValueError("loss weights must be nonnegative and not both zero")

    @property
    def s_over_d(self) -> float:
        return self.w_s / self.w_d if self.w_d > 0 else math.inf

    @classmethod
    def from_ratio(cls, sd_ratio: float, w_d: float = 1.0) -> "LossWeights":
        return cls(w_d, sd_ratio * w_d)


@dataclass(eq=False)
class EvalPair:
    predicted: np.ndarray
    ground_truth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=float)
        self.ground_truth = np.asarray(self.ground_truth, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if not (self.predicted.shape == self.ground_truth.shape == self.mask.shape):
            raise ValueError("prediction, ground truth and mask must share one grid")

    @classmethod
    def from_maps(cls, predicted, ground_truth, depth_range=DEPTH_RANGE,
                  clip: bool = False) -> "EvalPair":
        """Pair two depth maps (or arrays); the mask is joint validity within ``depth_range``.

        With ``clip`` finite predictions are clamped to ``depth_range``, the
        usual treatment of a network's bounded output.
        """
        pred = predicted.values if isinstance(predicted, DepthMap) else np.asarray(predicted, float)
        gt = ground_truth.values if isinstance(ground_truth, DepthMap) else np.asarray(ground_truth, float)
        if clip:
            pred = np.clip(pred, *(depth_range or DEPTH_RANGE))
        mask = np.isfinite(pred) & np.isfinite(gt)
        if isinstance(predicted, DepthMap):
            mask &= predicted.valid
        if isinstance(ground_truth, DepthMap):
            mask &= ground_truth.valid
        if depth_range is not None:
            with np.errstate(invalid="ignore"):
                mask &= (gt >= depth_range[0]) & (gt <= depth_range[1])
        return cls(pred, gt, mask)


def _fsum_mean(x: np.ndarray) -> float:
    # compensated sum in a fixed order keeps reports bit-reproducible
    return math.fsum(x.tolist()) / len(x)


def depth_metrics(pair: EvalPair) -> MetricsReport:
    """Standard monocular depth errors over the masked pixels.

    SILog is ``100 * sqrt(mean(e^2) - mean(e)^2)`` with ``e = ln d - ln g``.
    """
    d = pair.predicted[pair.mask]
    g = pair.ground_truth[pair.mask]
    if d.size == 0:
        raise EmptyMask("no pixels to evaluate")
    if np.any(~(d > 0)) or np.any(~(g > 0)):
        raise NonPositiveValue("depth metrics need strictly positive values")
    diff = d - g
    log_err = np.log(d) - np.log(g)
    ratio = np.maximum(d / g, g / d)
    mean_sq_log = _fsum_mean(log_err ** 2)
    mean_log = _fsum_mean(log_err)
    return MetricsReport(
        rel=_fsum_mean(np.abs(diff) / g),
        sq_rel=_fsum_mean(diff ** 2 / g),
        rmse=math.sqrt(_fsum_mean(diff ** 2)),
        rmse_log=math.sqrt(mean_sq_log),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        silog=100.0 * math.sqrt(max(mean_sq_log - mean_log ** 2, 0.0)),
        n_evaluated=int(d.size),
    )


def class_masked_metrics(pair: EvalPair, class_mask) -> MetricsReport:
    class_mask = np.asarray(class_mask, dtype=bool)
    if class_mask.shape != pair.mask.shape:
        raise ValueError("class mask grid does not match the evaluation pair")
    mask = pair.mask & class_mask
    if not mask.any():
        raise EmptyMask("class mask does not overlap any valid pixel")
    return depth_metrics(EvalPair(pair.predicted, pair.ground_truth, mask))


@dataclass(frozen=True)
class JointLoss:
    total: float
    loss_d: float
    loss_s: float
    empty_d: bool = False
    empty_s: bool = False


def _l1(pred, gt, mask) -> tuple[float, bool]:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth grids differ")
    mask = np.isfinite(gt) & np.isfinite(pred) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0, True
    return math.fsum(np.abs(pred[mask] - gt[mask]).tolist()), False


def joint_loss(pred_d, gt_d, pred_s, gt_s, mask_d=None, mask_s=None,
               weights: LossWeights = LossWeights()) -> JointLoss:
    """``w_d * L1_depth + w_s * L1_structure``, each summed over its own mask.

    A branch with an empty mask contributes 0 and sets its ``empty_*`` flag.
    """
    loss_d, empty_d = _l1(pred_d, gt_d, mask_d)
    loss_s, empty_s = _l1(pred_s, gt_s, mask_s)
    if empty_d:
        logger.warning("depth branch has no labelled pixels")
    if empty_s:
        logger.warning("structure branch has no labelled pixels")
    total = weights.w_d * loss_d + weights.w_s * loss_s
    return JointLoss(total, loss_d, loss_s, empty_d, empty_s)


def disparity_to_depth(sigma):
    """Sigmoid output to depth, ``1 / (a sigma + b)`` spanning [0.1, 100] m."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any((sigma < 0) | (sigma > 1)):
        raise ValueError("sigmoid output must lie in [0, 1]")
    Z = 1.0 / (DISP_A * sigma + DISP_B)
    return float(Z) if Z.ndim == 0 else Z


def _logistic(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


SIGMA_LO = _logistic(-2.0)
SIGMA_HI = _logistic(2.0)


def sigmoid_to_structure(sigma, gamma_range=GAMMA_RANGE):
    """Affine map of sigmoid output with ``logistic(-2) -> -0.5`` and ``logistic(2) -> 0.06``.

    Values outside the anchor interval extrapolate along the same line.
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any((sigma < 0) | (sigma > 1)):
        raise ValueError("sigmoid output must lie in [0, 1]")
    lo, hi = gamma_range
    t = (sigma - SIGMA_LO) / (SIGMA_HI - SIGMA_LO)
    # written so both anchors come out exact in floating point
    gamma = lo * (1.0 - t) + hi * t
    return float(gamma) if gamma.ndim == 0 else gamma


def structure_rel(smap: StructureMap, reference: DepthMap, plane_a: ReferencePlane,
                  K: CameraIntrinsics) -> float:
    """REL of the structure-route depth against a reference depth map."""
    depth = structure_map_to_depth(smap, plane_a, K, depth_range=(0.0, math.inf))
    pair = EvalPair.from_maps(depth, reference)
    return depth_metrics(pair).rel


def quality_filter(items, threshold: float = QUALITY_REL):
    """Split ``(structure_map, reference_depth, plane_a, K)`` items by structure-route REL.

    Items with ``REL <= threshold`` are kept. An item with no pixel valid in
    both maps is rejected. Returns ``(kept, rejected)`` as lists of
    ``(index, rel)``.
    """
    kept, rejected = [], []
    for i, (smap, ref, plane_a, K) in enumerate(items):
        try:
            rel = structure_rel(smap, ref, plane_a, K)
        except (EmptyMask, NonPositiveValue):
            rejected.append((i, math.inf))
            continue
        (kept if rel <= threshold else rejected).append((i, rel))
    return kept, rejected
