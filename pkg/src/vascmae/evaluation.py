"""Whole-volume inference and the full metric protocol.

Covers sliding-window inference with NMS merging, greedy IoU matching of
detections to ground truth, FROC curves, sensitivity at an FP budget,
patient-level sensitivity/specificity, diameter-stratified sensitivity, and
a paired sign-flip permutation test for model comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .geometry import BoundingCube, DistanceMap, cube_iou, scale_distance_channel
from .model import AneurysmDetector, Detection, detections_from_raw
from .synthvasc import Case

DEFAULT_T_IOU = 0.3
DEFAULT_FPR_BUDGET = 0.5
DEFAULT_NMS_IOU = 0.25
DEFAULT_STRIDE = 32
WINDOW = 64
STRATA_EDGES_MM = (3.0, 7.0)


@dataclass
class CasePredictions:
    """Score-sorted world-space detections for one case."""

    case_id: str
    detections: list[Detection]

    def __post_init__(self):
        self.detections = sorted(self.detections, key=lambda d: -d.score)


@dataclass
class FrocCurve:
    """Operating points swept over every distinct score threshold."""

    thresholds: np.ndarray
    fpr: np.ndarray  # mean false positives per scan
    se: np.ndarray  # lesion-level sensitivity


@dataclass
class MatchedCase:
    """Per-case matching output: detection labels and ground-truth hits."""

    case_id: str
    det_scores: np.ndarray
    det_is_tp: np.ndarray
    gt_hit_scores: np.ndarray  # score of the claiming detection, nan if missed
    gt_diameters: np.ndarray
    is_healthy: bool


# ---------------------------------------------------------------------------
# Sliding-window inference
# ---------------------------------------------------------------------------


def _window_origins(dim: int, window: int, stride: int) -> list[int]:
    origins = list(range(0, dim - window + 1, stride))
    if origins[-1] != dim - window:
        origins.append(dim - window)
    return origins


def nms(detections: list[Detection], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Greedy score-ordered NMS; cubes overlapping a kept detection by more
    than the threshold are suppressed."""
    pending = sorted(detections, key=lambda d: -d.score)
    kept: list[Detection] = []
    for det in pending:
        cube = BoundingCube(det.center_mm, det.side_mm)
        if all(
            cube_iou(cube, BoundingCube(k.center_mm, k.side_mm)) <= iou_threshold
            for k in kept
        ):
            kept.append(det)
    return kept


def sliding_window_infer(
    model: AneurysmDetector,
    case: Case,
    dmap: DistanceMap,
    stride: int = DEFAULT_STRIDE,
    nms_iou: float = DEFAULT_NMS_IOU,
    batch_size: int = 8,
) -> CasePredictions:
    """Run the detector over 64-cube windows and merge duplicates.

    Volumes smaller than one window are centre-padded (background intensity,
    far-from-artery distance). Detections are decoded to world millimetres.
    """
    spacing = np.asarray(case.spacing_mm)
    volume = case.volume.astype(np.float32)
    distance = scale_distance_channel(dmap.values)
    dims = np.asarray(volume.shape)

    pad = np.maximum(WINDOW - dims, 0)
    pad_lo = pad // 2
    if pad.any():
        pad_spec = [(int(l), int(p - l)) for l, p in zip(pad_lo, pad)]
        volume = np.pad(volume, pad_spec, constant_values=0.0)
        distance = np.pad(distance, pad_spec, constant_values=float(distance.max(initial=1.0)))
        dims = np.asarray(volume.shape)

    origins = [
        (oz, oy, ox)
        for oz in _window_origins(int(dims[0]), WINDOW, stride)
        for oy in _window_origins(int(dims[1]), WINDOW, stride)
        for ox in _window_origins(int(dims[2]), WINDOW, stride)
    ]

    model.eval()
    extent_mm = WINDOW * spacing
    collected: list[Detection] = []
    with torch.no_grad():
        for start in range(0, len(origins), batch_size):
            chunk = origins[start : start + batch_size]
            windows = np.stack(
                [
                    np.stack(
                        [
                            volume[oz : oz + WINDOW, oy : oy + WINDOW, ox : ox + WINDOW],
                            distance[oz : oz + WINDOW, oy : oy + WINDOW, ox : ox + WINDOW],
                        ]
                    )
                    for oz, oy, ox in chunk
                ]
            )
            raw = model(torch.from_numpy(windows))
            decoded = detections_from_raw(raw, extent_mm)
            for (oz, oy, ox), dets in zip(chunk, decoded):
                shift = (np.array([oz, oy, ox]) - pad_lo) * spacing
                for det in dets:
                    collected.append(
                        Detection(
                            score=det.score,
                            center_mm=tuple((np.asarray(det.center_mm) + shift).tolist()),
                            side_mm=det.side_mm,
                        )
                    )
    return CasePredictions(case_id=case.case_id, detections=nms(collected, nms_iou))


# ---------------------------------------------------------------------------
# Matching and FROC
# ---------------------------------------------------------------------------


def match_detections(
    preds: CasePredictions,
    gts: Sequence[BoundingCube],
    gt_diameters: Sequence[float] | None = None,
    t_iou: float = DEFAULT_T_IOU,
) -> MatchedCase:
    """Greedy score-descending matching at an IoU threshold.

    Each detection claims the highest-IoU unclaimed ground truth with
    IoU >= t_iou (TP) or is a false positive; every ground truth can be
    claimed once.
    """
    gts = list(gts)
    if gt_diameters is None:
        gt_diameters = [g.side_mm for g in gts]
    claimed = [False] * len(gts)
    gt_hit_scores = np.full(len(gts), np.nan)
    scores = np.array([d.score for d in preds.detections], dtype=np.float64)
    is_tp = np.zeros(len(scores), dtype=bool)
    for i, det in enumerate(preds.detections):
        cube = BoundingCube(det.center_mm, det.side_mm)
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if claimed[j]:
                continue
            iou = cube_iou(cube, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= t_iou:
            claimed[best_j] = True
            is_tp[i] = True
            gt_hit_scores[best_j] = det.score
    return MatchedCase(
        case_id=preds.case_id,
        det_scores=scores,
        det_is_tp=is_tp,
        gt_hit_scores=gt_hit_scores,
        gt_diameters=np.asarray(list(gt_diameters), dtype=np.float64),
        is_healthy=len(gts) == 0,
    )


def froc(matched: Sequence[MatchedCase]) -> FrocCurve:
    """Sensitivity vs mean FPs/scan over all distinct score thresholds."""
    if not matched:
        raise ValueError("no cases to evaluate")
    n_scans = len(matched)
    total_gts = int(sum(len(m.gt_diameters) for m in matched))
    if total_gts == 0:
        raise ValueError("no lesions in evaluation set")
    scores = np.concatenate([m.det_scores for m in matched]) if matched else np.array([])
    labels = np.concatenate([m.det_is_tp for m in matched]) if matched else np.array([])
    if scores.size == 0:
        return FrocCurve(
            thresholds=np.array([np.inf]), fpr=np.array([0.0]), se=np.array([0.0])
        )
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    cum_tp = np.cumsum(labels)
    cum_fp = np.cumsum(~labels)
    # Keep one point per distinct threshold: the last row of each score run.
    last = np.nonzero(np.diff(scores, append=-np.inf))[0]
    return FrocCurve(
        thresholds=scores[last],
        fpr=cum_fp[last] / n_scans,
        se=cum_tp[last] / total_gts,
    )


def se_at_fpr(curve: FrocCurve, fpr_budget: float = DEFAULT_FPR_BUDGET) -> float:
    """Best sensitivity among points with FPs/scan within the budget."""
    if fpr_budget < 0:
        raise ValueError(f"fpr budget must be non-negative, got {fpr_budget}")
    eligible = curve.fpr <= fpr_budget
    if not eligible.any():
        return 0.0
    return float(curve.se[eligible].max())


def operating_point(curve: FrocCurve, fpr_budget: float = DEFAULT_FPR_BUDGET) -> tuple[float, float]:
    """(sensitivity, threshold) of the chosen operating point; threshold is
    +inf when no point fits the budget (i.e. report nothing)."""
    if fpr_budget < 0:
        raise ValueError(f"fpr budget must be non-negative, got {fpr_budget}")
    eligible = np.nonzero(curve.fpr <= fpr_budget)[0]
    if eligible.size == 0:
        return 0.0, float("inf")
    best = eligible[np.argmax(curve.se[eligible])]
    return float(curve.se[best]), float(curve.thresholds[best])


def patient_metrics(matched: Sequence[MatchedCase], threshold: float) -> tuple[float, float | None]:
    """Patient-level sensitivity and specificity at a score threshold.

    P-Se: fraction of lesion-bearing cases with at least one TP at or above
    the threshold. P-Sp: fraction of healthy cases with zero detections at
    or above the threshold; None when the set has no healthy cases.
    """
    diseased = [m for m in matched if not m.is_healthy]
    healthy = [m for m in matched if m.is_healthy]
    p_se = (
        float(
            np.mean(
                [bool((m.gt_hit_scores >= threshold).any()) for m in diseased]
            )
        )
        if diseased
        else 0.0
    )
    if not healthy:
        return p_se, None
    p_sp = float(np.mean([not (m.det_scores >= threshold).any() for m in healthy]))
    return p_se, p_sp


def strata_sensitivity(
    matched: Sequence[MatchedCase],
    threshold: float,
    edges: tuple[float, float] = STRATA_EDGES_MM,
) -> dict[str, float | None]:
    """Sensitivity at a threshold, split by lesion diameter.

    Bands are [0, edges[0]) small, [edges[0], edges[1]) medium, and
    [edges[1], inf) large; a band with no lesions reports None.
    """
    diameters = np.concatenate([m.gt_diameters for m in matched]) if matched else np.array([])
    hits = (
        np.concatenate([m.gt_hit_scores for m in matched]) >= threshold
        if matched
        else np.array([], dtype=bool)
    )
    lo, hi = edges
    bands = {
        "small": diameters < lo,
        "medium": (diameters >= lo) & (diameters < hi),
        "large": diameters >= hi,
    }
    return {
        name: (float(hits[sel].mean()) if sel.any() else None)
        for name, sel in bands.items()
    }


def lesion_hit_vector(matched: Sequence[MatchedCase], threshold: float) -> np.ndarray:
    """Per-lesion hit flags at a threshold, in case order; the pairing unit
    for the permutation test."""
    parts = [m.gt_hit_scores >= threshold for m in matched]
    return np.concatenate(parts).astype(np.float64) if parts else np.array([])


def permutation_test(
    hits_a: np.ndarray,
    hits_b: np.ndarray,
    n_perm: int = 10_000,
    seed: int = 0,
) -> float:
    """Two-sided paired sign-flip permutation test on the mean hit difference.

    Add-one smoothed, so p is in (0, 1]; symmetric in (A, B); deterministic
    given the seed.
    """
    a = np.asarray(hits_a, dtype=np.float64)
    b = np.asarray(hits_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired vectors differ in length: {a.shape} vs {b.shape}")
    d = a - b
    observed = abs(d.mean())
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=(n_perm, d.size)) * 2 - 1
    perm_means = np.abs((signs * d).mean(axis=1))
    exceed = int((perm_means >= observed - 1e-12).sum())
    return (1 + exceed) / (n_perm + 1)
