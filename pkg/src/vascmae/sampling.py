"""Artery-constrained crop extraction and artery-biased masked-patch plans.

Crops are 64-cubes with two channels (intensity, scaled distance map) and
are accepted only when at least 10% of their voxels overlap the artery
mask. Mask plans pick exactly round(ratio * n_patches) patches by weighted
sampling without replacement, the weight of patch i being
``eps + artery_fraction_i ** beta``; beta = 0 reduces to uniform masking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BoundingCube, DistanceMap, scale_distance_channel
from .synthvasc import Case

CROP_SIZE = 64
PATCH_SIZE = 4
DEFAULT_MIN_ARTERY_FRAC = 0.10
DEFAULT_MASK_RATIO = 0.75
DEFAULT_MASK_EPS = 0.05
MAX_CROP_TRIES = 1000


class CropRejectionError(RuntimeError):
    """No crop satisfying the artery-overlap constraint could be drawn."""


@dataclass
class CropSample:
    """Two-channel 64-cube plus per-patch artery statistics.

    ``channels`` is (2, 64, 64, 64) float32: channel 0 intensity in [0, 1],
    channel 1 the clipped/scaled distance map. ``gt_lesions_local`` holds
    every ground-truth cube intersecting the crop, translated into
    crop-local millimetres.
    """

    channels: np.ndarray
    origin_voxel: tuple[int, int, int]
    patch_artery_frac: np.ndarray
    gt_lesions_local: list[BoundingCube]
    spacing_mm: tuple[float, float, float]

    @property
    def extent_mm(self) -> np.ndarray:
        return np.asarray(self.channels.shape[1:]) * np.asarray(self.spacing_mm)


@dataclass
class MaskPlan:
    masked: np.ndarray  # boolean patch grid, C order
    n_masked: int

    def flat(self) -> np.ndarray:
        return self.masked.reshape(-1)

    def to_bits(self) -> str:
        """Scan-order 0/1 dump for debugging."""
        return "".join("1" if m else "0" for m in self.flat())


def patch_artery_fractions(mask_crop: np.ndarray, patch: int = PATCH_SIZE) -> np.ndarray:
    """Fraction of artery voxels in each patch-cube of a binary crop."""
    s = mask_crop.shape[0]
    g = s // patch
    blocks = mask_crop.reshape(g, patch, g, patch, g, patch)
    return blocks.mean(axis=(1, 3, 5)).astype(np.float32)


class CropSampler:
    """Rejection sampler over valid crop origins of one case.

    Precomputes a summed-area table of the artery mask so each proposal is
    O(1), and the scaled distance channel once per case.
    """

    def __init__(
        self,
        case: Case,
        dmap: DistanceMap,
        crop_size: int = CROP_SIZE,
        min_artery_frac: float = DEFAULT_MIN_ARTERY_FRAC,
        max_tries: int = MAX_CROP_TRIES,
    ):
        if any(d < crop_size for d in case.dims):
            raise CropRejectionError(
                f"volume dims {case.dims} smaller than crop size {crop_size}"
            )
        if dmap.values.shape != case.volume.shape:
            raise ValueError("distance map dims do not match the case volume")
        self.case = case
        self.crop_size = crop_size
        self.min_artery_frac = min_artery_frac
        self.max_tries = max_tries
        self.has_artery = bool(case.artery_mask.any()) and dmap.has_foreground
        self.scaled_distance = scale_distance_channel(dmap.values)
        table = case.artery_mask.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
        self._table = np.pad(table, ((1, 0), (1, 0), (1, 0)))

    def artery_fraction(self, origin) -> float:
        """Artery-voxel fraction of the crop at ``origin``, from the table."""
        oz, oy, ox = (int(o) for o in origin)
        w = self.crop_size
        t = self._table
        s = (
            t[oz + w, oy + w, ox + w]
            - t[oz, oy + w, ox + w]
            - t[oz + w, oy, ox + w]
            - t[oz + w, oy + w, ox]
            + t[oz, oy, ox + w]
            + t[oz, oy + w, ox]
            + t[oz + w, oy, ox]
            - t[oz, oy, ox]
        )
        return float(s) / w**3

    def crop_at(self, origin) -> CropSample:
        """Materialise the crop at a (valid) origin."""
        oz, oy, ox = (int(o) for o in origin)
        w = self.crop_size
        sl = (slice(oz, oz + w), slice(oy, oy + w), slice(ox, ox + w))
        channels = np.stack(
            [self.case.volume[sl], self.scaled_distance[sl]]
        ).astype(np.float32)
        frac = patch_artery_fractions(self.case.artery_mask[sl])
        spacing = np.asarray(self.case.spacing_mm)
        origin_mm = np.array([oz, oy, ox]) * spacing
        crop_hi_mm = origin_mm + w * spacing
        local = []
        for lesion in self.case.lesions:
            c = np.asarray(lesion.center_mm)
            half = lesion.side_mm / 2.0
            if (c + half <= origin_mm).any() or (c - half >= crop_hi_mm).any():
                continue
            local.append(
                BoundingCube(tuple((c - origin_mm).tolist()), lesion.side_mm)
            )
        return CropSample(
            channels=channels,
            origin_voxel=(oz, oy, ox),
            patch_artery_frac=frac,
            gt_lesions_local=local,
            spacing_mm=self.case.spacing_mm,
        )

    def sample(self, rng: np.random.Generator) -> CropSample:
        """Uniform rejection sampling until the artery-overlap test passes."""
        if not self.has_artery:
            raise CropRejectionError(
                f"{self.case.case_id}: no valid crop (artery mask empty)"
            )
        span = np.asarray(self.case.dims) - self.crop_size
        for _ in range(self.max_tries):
            origin = rng.integers(0, span + 1)
            if self.artery_fraction(origin) >= self.min_artery_frac:
                return self.crop_at(origin)
        raise CropRejectionError(
            f"{self.case.case_id}: no valid crop after {self.max_tries} proposals"
        )


def sample_crop(
    case: Case,
    dmap: DistanceMap,
    rng: np.random.Generator,
    min_artery_frac: float = DEFAULT_MIN_ARTERY_FRAC,
) -> CropSample:
    """One-shot convenience wrapper; reuse :class:`CropSampler` in loops."""
    return CropSampler(case, dmap, min_artery_frac=min_artery_frac).sample(rng)


def plan_mask(
    crop: CropSample | np.ndarray,
    rng: np.random.Generator,
    ratio: float = DEFAULT_MASK_RATIO,
    beta: float = 1.0,
    eps: float = DEFAULT_MASK_EPS,
    mode: str = "stochastic",
) -> MaskPlan:
    """Choose masked patches, biased toward high artery fraction.

    Weighted sampling without replacement via the exponential-sort scheme:
    draw E_i ~ Exp(w_i) and keep the k smallest keys. ``mode='topk'`` is a
    deterministic ablation that masks the k highest-weight patches.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    frac = crop.patch_artery_frac if isinstance(crop, CropSample) else np.asarray(crop)
    flat = frac.reshape(-1).astype(np.float64)
    n = flat.size
    k = round(ratio * n)
    weights = eps + np.power(flat, beta)
    if mode == "stochastic":
        keys = rng.exponential(1.0, size=n) / weights
        chosen = np.argsort(keys, kind="stable")[:k]
    elif mode == "topk":
        chosen = np.argsort(-weights, kind="stable")[:k]
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    masked = np.zeros(n, dtype=bool)
    masked[chosen] = True
    return MaskPlan(masked=masked.reshape(frac.shape), n_masked=k)
