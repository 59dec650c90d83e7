"""Reconstruction and detection objectives plus the two optimization loops.

Pre-training minimises masked-token MSE over both input channels with a
cosine learning-rate schedule. Fine-tuning optimises the average of four
terms: BCE over all queries, and center/size/IoU regressions over the
positive queries found by Hungarian matching on center distance, extended
by the under-1-mm multi-match rule.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .geometry import BoundingCube, DistanceMap
from .model import (
    AneurysmDetector,
    Checkpoint,
    MaeModel,
    ModelConfig,
    decode_raw,
    ensure_config_match,
    load_model_arrays,
    patchify,
)
from .sampling import (
    CropRejectionError,
    CropSample,
    CropSampler,
    MaskPlan,
    plan_mask,
)
from .synthvasc import Case

logger = logging.getLogger(__name__)

PRETRAIN_LOG_FIELDS = ("epoch", "step", "loss", "loss_intensity", "loss_distance")
FINETUNE_LOG_FIELDS = ("epoch", "step", "loss", "bce", "center", "size", "iou")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    lr_start: float = 1.5e-3
    lr_end: float = 1.5e-4
    weight_decay: float = 0.05
    batch_size: int = 8
    seed: int = 0
    crops_per_case: int = 4
    mask_ratio: float = 0.75
    mask_beta: float = 1.0
    mask_eps: float = 0.05
    min_artery_frac: float = 0.10
    reconstruct_distance: bool = True

    def validate(self) -> None:
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError(
                f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}"
            )
        if self.epochs < 1 or self.batch_size < 1 or self.crops_per_case < 1:
            raise ValueError("epochs, batch_size, crops_per_case must be >= 1")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 0.05
    multi_match_radius_mm: float = 1.0
    batch_size: int = 8
    seed: int = 0
    crops_per_case: int = 2
    positive_fraction: float = 0.5
    # Lesion-centred crops are jittered this far (voxels) per axis, so that
    # training covers the off-centre placements sliding windows produce.
    positive_jitter_vox: int = 16
    min_artery_frac: float = 0.10

    def validate(self) -> None:
        if self.multi_match_radius_mm <= 0:
            raise ValueError("multi_match_radius_mm must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def cosine_lr(epoch: int, total_epochs: int, lr_start: float, lr_end: float) -> float:
    """Cosine decay hitting lr_start at epoch 0 and lr_end at the last epoch."""
    if total_epochs <= 1:
        return lr_start
    t = epoch / (total_epochs - 1)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class MaeLossResult:
    total: torch.Tensor
    intensity: torch.Tensor
    distance: torch.Tensor


def _plans_to_mask(plans, n_tokens: int, batch: int) -> torch.Tensor:
    if isinstance(plans, MaskPlan):
        plans = [plans]
    if isinstance(plans, (list, tuple)):
        stacked = np.stack([p.flat() for p in plans])
        mask = torch.from_numpy(stacked)
    else:
        mask = torch.as_tensor(plans, dtype=torch.bool)
        if mask.ndim == 1:
            mask = mask[None]
    if mask.shape != (batch, n_tokens):
        raise ValueError(f"mask plan shape {tuple(mask.shape)} != ({batch}, {n_tokens})")
    return mask


def mae_loss(
    reconstruction: torch.Tensor,
    target: torch.Tensor,
    plans,
    ratio: float = 0.75,
) -> MaeLossResult:
    """MSE over masked tokens only, split per channel for logging.

    ``reconstruction`` and ``target`` are (B, P, C*patch^3) with channel-major
    token vectors; unmasked tokens contribute nothing. The plan must mask
    exactly round(ratio * P) tokens per sample (3072 of 4096 at defaults).
    """
    b, n_tokens, width = reconstruction.shape
    mask = _plans_to_mask(plans, n_tokens, b)
    expected = round(ratio * n_tokens)
    counts = mask.sum(dim=1)
    if not bool((counts == expected).all()):
        raise ValueError(
            f"mask plan must mask exactly {expected} of {n_tokens} tokens, "
            f"got counts {counts.tolist()}"
        )
    diff2 = (reconstruction - target) ** 2
    masked = diff2[mask]  # (B*expected, width)
    half = width // 2
    intensity = masked[:, :half].mean()
    distance = masked[:, half:].mean()
    return MaeLossResult(total=masked.mean(), intensity=intensity, distance=distance)


# ---------------------------------------------------------------------------
# Hungarian matching
# ---------------------------------------------------------------------------

_LEX_TIEBREAK_LIMIT = 32


def _hungarian_rect(cost: np.ndarray) -> list[tuple[int, int]]:
    """Optimal assignment for an (n, m) matrix with n <= m, by shortest
    augmenting paths with potentials. Assigns every row."""
    n, m = cost.shape
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    match = [0] * (m + 1)  # match[j] = row occupying column j (1-based)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    return sorted((match[j] - 1, j - 1) for j in range(1, m + 1) if match[j])


def _assignment_cost(cost: np.ndarray) -> float:
    n, m = cost.shape
    if n == 0 or m == 0:
        return 0.0
    pairs = _hungarian_rect(cost) if n <= m else [(r, c) for c, r in _hungarian_rect(cost.T)]
    return float(sum(cost[r, c] for r, c in pairs))


def hungarian_match(cost) -> list[tuple[int, int]]:
    """Minimum-cost injective assignment of min(n, m) (row, col) pairs.

    Ties between equal-cost optima are broken toward the lexicographically
    smallest pair list (row 0 gets its lowest feasible column, then row 1,
    and so on) for matrices up to 32 on a side; larger matrices still get a
    deterministic optimum. Raises on non-finite costs.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2D, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")

    if max(n, m) > _LEX_TIEBREAK_LIMIT:
        if n <= m:
            return _hungarian_rect(cost)
        return sorted((r, c) for c, r in _hungarian_rect(cost.T))

    # Lexicographic canonicalization: greedily force each row to its lowest
    # column (or to stay unassigned, when rows outnumber columns) whenever an
    # optimal completion exists.
    total = _assignment_cost(cost)
    tol = 1e-9 * max(1.0, abs(total))
    pairs: list[tuple[int, int]] = []
    cols_avail = list(range(m))
    target = total
    for r in range(n):
        rows_after = n - r - 1
        sub_rows = np.arange(r + 1, n)
        forced = None
        for c in cols_avail:
            rest_cols = [cc for cc in cols_avail if cc != c]
            sub = cost[np.ix_(sub_rows, rest_cols)]
            if abs(cost[r, c] + _assignment_cost(sub) - target) <= tol:
                forced = c
                break
        if forced is None:
            # Row stays unassigned; legal only when later rows can still
            # consume every remaining column.
            if rows_after < len(cols_avail):
                raise AssertionError("hungarian tie-break failed to certify a column")
            sub = cost[np.ix_(sub_rows, np.asarray(cols_avail, dtype=int))]
            if abs(_assignment_cost(sub) - target) > tol:
                raise AssertionError("hungarian tie-break failed to certify a skip")
        else:
            pairs.append((r, forced))
            cols_avail.remove(forced)
            target -= cost[r, forced]
        if not cols_avail:
            break
    return pairs


# ---------------------------------------------------------------------------
# Detection loss
# ---------------------------------------------------------------------------


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    extra_positive: list[tuple[int, int]]
    unmatched_queries: list[int]


@dataclass
class DetectionLossResult:
    total: torch.Tensor
    bce: float
    center: float | None
    size: float | None
    iou: float | None
    matches: list[MatchResult] = field(default_factory=list)


def cube_iou_torch(c1: torch.Tensor, s1: torch.Tensor, c2: torch.Tensor, s2: torch.Tensor) -> torch.Tensor:
    """Differentiable IoU between cube batches (centres (K, 3), sides (K,))."""
    lo = torch.maximum(c1 - s1[:, None] / 2, c2 - s2[:, None] / 2)
    hi = torch.minimum(c1 + s1[:, None] / 2, c2 + s2[:, None] / 2)
    edge = torch.clamp(hi - lo, min=0.0)
    inter = edge.prod(dim=-1)
    union = s1**3 + s2**3 - inter
    return inter / union


def match_queries_to_gts(
    centers_mm: np.ndarray, gt_centers_mm: np.ndarray, radius_mm: float
) -> MatchResult:
    """Hungarian match on center distance plus the within-radius multi-match.

    Unmatched queries strictly closer than ``radius_mm`` to some ground
    truth become extra positives assigned to their nearest ground truth;
    Hungarian pairs are never removed.
    """
    n_q = len(centers_mm)
    dist = np.linalg.norm(centers_mm[:, None, :] - gt_centers_mm[None, :, :], axis=-1)
    pairs = hungarian_match(dist)
    matched_q = {q for q, _ in pairs}
    extra = []
    unmatched = []
    for q in range(n_q):
        if q in matched_q:
            continue
        g = int(np.argmin(dist[q]))
        if dist[q, g] < radius_mm:
            extra.append((q, g))
        else:
            unmatched.append(q)
    return MatchResult(pairs=pairs, extra_positive=extra, unmatched_queries=unmatched)


def detection_loss(
    raw: torch.Tensor,
    gts: Sequence[Sequence[BoundingCube]],
    extent_mm,
    cfg: FinetuneConfig,
) -> DetectionLossResult:
    """Average of BCE, center-MSE, log-size-MSE and IoU-MSE per sample.

    ``raw`` is the (B, n_queries, 5) head output; ``gts`` holds each
    sample's ground-truth cubes in crop-local millimetres. Samples without
    ground truth contribute the classification term only.
    """
    if raw.ndim == 2:
        raw = raw[None]
        gts = [gts]  # type: ignore[list-item]
    b, n_q, _ = raw.shape
    extent = torch.as_tensor(np.asarray(extent_mm, dtype=np.float64), dtype=raw.dtype)
    logits = raw[..., 0]
    _, centers_mm, sides_mm, log_sides = decode_raw(raw, extent)

    totals = []
    bces = []
    spatial = {"center": [], "size": [], "iou": []}
    matches = []
    for i in range(b):
        sample_gts = list(gts[i])
        labels = torch.zeros(n_q, dtype=raw.dtype)
        if not sample_gts:
            bce = torch.nn.functional.binary_cross_entropy_with_logits(logits[i], labels)
            totals.append(bce)
            bces.append(bce)
            matches.append(MatchResult([], [], list(range(n_q))))
            continue

        gt_centers = np.asarray([g.center_mm for g in sample_gts], dtype=np.float64)
        gt_sides = np.asarray([g.side_mm for g in sample_gts], dtype=np.float64)
        match = match_queries_to_gts(
            centers_mm[i].detach().cpu().numpy().astype(np.float64),
            gt_centers,
            cfg.multi_match_radius_mm,
        )
        matches.append(match)
        positives = match.pairs + match.extra_positive
        q_idx = torch.tensor([q for q, _ in positives])
        g_idx = [g for _, g in positives]
        labels[q_idx] = 1.0

        bce = torch.nn.functional.binary_cross_entropy_with_logits(logits[i], labels)
        gt_c = torch.as_tensor(gt_centers[g_idx], dtype=raw.dtype)
        gt_s = torch.as_tensor(gt_sides[g_idx], dtype=raw.dtype)
        center_mse = (((centers_mm[i, q_idx] - gt_c) / extent) ** 2).mean()
        size_mse = ((log_sides[i, q_idx] - torch.log(gt_s)) ** 2).mean()
        ious = cube_iou_torch(centers_mm[i, q_idx], sides_mm[i, q_idx], gt_c, gt_s)
        iou_mse = ((ious - 1.0) ** 2).mean()

        totals.append((bce + center_mse + size_mse + iou_mse) / 4.0)
        bces.append(bce)
        spatial["center"].append(center_mse)
        spatial["size"].append(size_mse)
        spatial["iou"].append(iou_mse)

    total = torch.stack(totals).mean()
    mean_or_none = lambda xs: float(torch.stack(xs).mean().detach()) if xs else None
    return DetectionLossResult(
        total=total,
        bce=float(torch.stack(bces).mean().detach()),
        center=mean_or_none(spatial["center"]),
        size=mean_or_none(spatial["size"]),
        iou=mean_or_none(spatial["iou"]),
        matches=matches,
    )


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _write_log(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        writer.writerows(rows)


def _build_samplers(cases, min_artery_frac):
    samplers = []
    for case, dmap in cases:
        try:
            samplers.append(CropSampler(case, dmap, min_artery_frac=min_artery_frac))
        except CropRejectionError as exc:
            logger.warning("skipping %s: %s", case.case_id, exc)
            samplers.append(None)
    return samplers


def _batched(items, size):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def _crop_tensor(crops: list[CropSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([c.channels for c in crops]))


def pretrain(
    cases: Sequence[tuple[Case, DistanceMap]],
    model_cfg: ModelConfig,
    cfg: PretrainConfig,
    log_path=None,
) -> tuple[MaeModel, list[tuple]]:
    """Masked-reconstruction pre-training; deterministic given cfg.seed."""
    cfg.validate()
    if not cases:
        raise ValueError("empty case list")
    torch.manual_seed(cfg.seed)
    model = MaeModel(model_cfg)
    model.train()
    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr_start, weight_decay=cfg.weight_decay
    )
    samplers = _build_samplers(cases, cfg.min_artery_frac)

    history = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end)
        for group in opt.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([cfg.seed, 1_000 + epoch])
        skipped = 0
        batch_items: list[tuple[CropSample, MaskPlan]] = []
        for ci in rng.permutation(len(cases)):
            sampler = samplers[ci]
            if sampler is None:
                skipped += 1
                continue
            try:
                for _ in range(cfg.crops_per_case):
                    crop = sampler.sample(rng)
                    plan = plan_mask(
                        crop, rng, ratio=cfg.mask_ratio, beta=cfg.mask_beta, eps=cfg.mask_eps
                    )
                    batch_items.append((crop, plan))
            except CropRejectionError as exc:
                logger.warning("skipping %s this epoch: %s", cases[ci][0].case_id, exc)
                skipped += 1
        if skipped > 0.5 * len(cases):
            raise RuntimeError(
                f"{skipped}/{len(cases)} cases yielded no valid crop; aborting"
            )

        for batch in _batched(batch_items, cfg.batch_size):
            channels = _crop_tensor([c for c, _ in batch])
            visible = torch.from_numpy(
                np.stack([~p.flat() for _, p in batch])
            )
            target = patchify(channels, model_cfg.patch)
            recon = model(channels, visible)
            out = mae_loss(recon, target, [p for _, p in batch], ratio=cfg.mask_ratio)
            loss = out.total if cfg.reconstruct_distance else out.intensity
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(
                (
                    epoch,
                    step,
                    float(loss.detach()),
                    float(out.intensity.detach()),
                    float(out.distance.detach()),
                )
            )
            step += 1

    if log_path is not None:
        _write_log(log_path, PRETRAIN_LOG_FIELDS, history)
    return model, history


def _positive_crop(sampler: CropSampler, case: Case, rng, jitter_vox: int = 16) -> CropSample:
    """Crop jittered around a random ground-truth lesion.

    The jitter is capped so the lesion cube stays inside the crop."""
    lesion = case.lesions[int(rng.integers(len(case.lesions)))]
    spacing = np.asarray(case.spacing_mm)
    center_vox = np.asarray(lesion.center_mm) / spacing
    half_vox = lesion.side_mm / 2.0 / spacing
    limit = np.minimum(jitter_vox, sampler.crop_size // 2 - np.ceil(half_vox) - 1)
    limit = np.maximum(limit, 0).astype(int)
    jitter = rng.integers(-limit, limit + 1, size=3)
    origin = np.round(center_vox).astype(int) - sampler.crop_size // 2 + jitter
    origin = np.clip(origin, 0, np.asarray(case.dims) - sampler.crop_size)
    return sampler.crop_at(origin)


def _crop_targets(crop: CropSample) -> list[BoundingCube]:
    """Ground-truth cubes whose centre falls inside the crop volume."""
    extent = crop.extent_mm
    out = []
    for cube in crop.gt_lesions_local:
        c = np.asarray(cube.center_mm)
        if (c >= 0).all() and (c < extent).all():
            out.append(cube)
    return out


def finetune(
    cases: Sequence[tuple[Case, DistanceMap]],
    model_cfg: ModelConfig,
    cfg: FinetuneConfig,
    pretrained: Checkpoint | None = None,
    log_path=None,
) -> tuple[AneurysmDetector, list[tuple]]:
    """Detection fine-tuning, from a pre-train checkpoint or from scratch.

    Half the crops (``positive_fraction``) are jittered around ground-truth
    lesions so the 8 queries regularly see positives; the rest are random
    valid crops.
    """
    cfg.validate()
    if not cases:
        raise ValueError("empty case list")
    torch.manual_seed(cfg.seed)
    detector = AneurysmDetector(model_cfg)
    if pretrained is not None:
        ensure_config_match(pretrained.config, model_cfg)
        encoder_arrays = {
            name.removeprefix("encoder."): arr
            for name, arr in pretrained.arrays.items()
            if name.startswith("encoder.")
        }
        load_model_arrays(detector.encoder, encoder_arrays)
    detector.train()
    opt = torch.optim.AdamW(detector.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    samplers = _build_samplers(cases, cfg.min_artery_frac)

    history = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 2_000 + epoch])
        crops: list[CropSample] = []
        skipped = 0
        for ci in rng.permutation(len(cases)):
            sampler = samplers[ci]
            case = cases[ci][0]
            if sampler is None:
                skipped += 1
                continue
            try:
                for _ in range(cfg.crops_per_case):
                    if case.lesions and rng.random() < cfg.positive_fraction:
                        crops.append(
                            _positive_crop(sampler, case, rng, cfg.positive_jitter_vox)
                        )
                    else:
                        crops.append(sampler.sample(rng))
            except CropRejectionError as exc:
                logger.warning("skipping %s this epoch: %s", case.case_id, exc)
                skipped += 1
        if skipped > 0.5 * len(cases):
            raise RuntimeError(
                f"{skipped}/{len(cases)} cases yielded no valid crop; aborting"
            )

        for batch in _batched(crops, cfg.batch_size):
            channels = _crop_tensor(batch)
            gts = [_crop_targets(c) for c in batch]
            raw = detector(channels)
            out = detection_loss(raw, gts, batch[0].extent_mm, cfg)
            opt.zero_grad()
            out.total.backward()
            opt.step()
            history.append(
                (
                    epoch,
                    step,
                    float(out.total.detach()),
                    out.bce,
                    _fmt(out.center),
                    _fmt(out.size),
                    _fmt(out.iou),
                )
            )
            step += 1

    if log_path is not None:
        _write_log(log_path, FINETUNE_LOG_FIELDS, history)
    return detector, history


def _fmt(value):
    return float("nan") if value is None else value
