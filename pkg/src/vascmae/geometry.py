"""Distance transforms, component-to-cube conversion, and cube overlap math.

Coordinate conventions used package-wide: grids are indexed (z, y, x) in
C order, world coordinates are millimetres with the origin at the centre
of voxel (0, 0, 0), so voxel (i, j, k) sits at (i*sz, j*sy, k*sx).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# Model-input scaling for the distance channel: raw signed millimetres are
# clipped to [-2, +20] and mapped affinely onto [-0.1, 1.0]. Unbounded
# distances destabilise MSE reconstruction.
DISTANCE_CLIP_MM = (-2.0, 20.0)
DISTANCE_SCALED_RANGE = (-0.1, 1.0)


@dataclass
class DistanceMap:
    """Signed Euclidean distance to the artery surface, in millimetres.

    Values are <= 0 exactly on artery voxels (negative of the distance to
    the nearest background voxel) and positive elsewhere (distance to the
    nearest artery voxel). ``has_foreground`` is False for an all-background
    mask, in which case every value is +inf and downstream sampling must
    reject the case.
    """

    values: np.ndarray
    spacing_mm: tuple[float, float, float]
    has_foreground: bool = True


@dataclass(frozen=True)
class BoundingCube:
    """Axis-aligned cube in world millimetres, (z, y, x) centre."""

    center_mm: tuple[float, float, float]
    side_mm: float

    def __post_init__(self):
        if not self.side_mm > 0:
            raise ValueError(f"cube side must be positive, got {self.side_mm}")


def signed_distance_map(mask: np.ndarray, spacing_mm) -> DistanceMap:
    """Exact signed Euclidean distance transform of a binary artery mask.

    For background voxels the value is the distance to the nearest
    foreground voxel centre; for foreground voxels it is minus the distance
    to the nearest background voxel centre. Anisotropic spacing is honoured.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3D, got shape {mask.shape}")
    spacing = tuple(float(s) for s in spacing_mm)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive reals, got {spacing_mm}")

    if not mask.any():
        values = np.full(mask.shape, np.inf, dtype=np.float32)
        return DistanceMap(values=values, spacing_mm=spacing, has_foreground=False)

    # distance_transform_edt measures to the nearest zero of its input.
    outside = ndimage.distance_transform_edt(~mask, sampling=spacing)
    if mask.all():
        inside = np.full(mask.shape, np.inf)
    else:
        inside = ndimage.distance_transform_edt(mask, sampling=spacing)
    values = np.where(mask, -inside, outside).astype(np.float32)
    return DistanceMap(values=values, spacing_mm=spacing, has_foreground=True)


def scale_distance_channel(values: np.ndarray) -> np.ndarray:
    """Clip raw signed distances and rescale them for model input."""
    lo, hi = DISTANCE_CLIP_MM
    out_lo, out_hi = DISTANCE_SCALED_RANGE
    clipped = np.clip(values, lo, hi)
    return ((clipped - lo) / (hi - lo) * (out_hi - out_lo) + out_lo).astype(np.float32)


_CONN_26 = np.ones((3, 3, 3), dtype=bool)


def mask_to_cubes(label_mask: np.ndarray, spacing_mm) -> list[BoundingCube]:
    """Convert the 26-connected components of a mask into bounding cubes.

    Each component's tight axis-aligned box is expanded symmetrically about
    its centre to a cube whose side is the largest box extent in mm. Cubes
    are returned in scan order of each component's first voxel.
    """
    label_mask = np.asarray(label_mask).astype(bool)
    spacing = np.asarray([float(s) for s in spacing_mm])
    if not label_mask.any():
        return []

    labels, n = ndimage.label(label_mask, structure=_CONN_26)
    cubes = []
    order = []
    for lab in range(1, n + 1):
        zz, yy, xx = np.nonzero(labels == lab)
        lo = np.array([zz.min(), yy.min(), xx.min()])
        hi = np.array([zz.max(), yy.max(), xx.max()])
        extent_mm = (hi - lo + 1) * spacing
        center_mm = (lo + hi) / 2.0 * spacing
        cubes.append(BoundingCube(tuple(center_mm.tolist()), float(extent_mm.max())))
        order.append(np.ravel_multi_index((zz[0], yy[0], xx[0]), label_mask.shape))
    # scipy labels in scan order already; sort defensively on first voxel.
    return [cube for _, cube in sorted(zip(order, cubes), key=lambda t: t[0])]


def cube_iou(a: BoundingCube, b: BoundingCube) -> float:
    """Intersection-over-union of two axis-aligned cubes."""
    if a.center_mm == b.center_mm and a.side_mm == b.side_mm:
        return 1.0
    ca = np.asarray(a.center_mm)
    cb = np.asarray(b.center_mm)
    ha, hb = a.side_mm / 2.0, b.side_mm / 2.0
    overlap = np.minimum(ca + ha, cb + hb) - np.maximum(ca - ha, cb - hb)
    if (overlap <= 0).any():
        return 0.0
    # Rounding in the overlap subtraction can nudge the product past the
    # smaller cube's volume, which would push IoU above 1; clamp it.
    inter = min(float(np.prod(overlap)), a.side_mm**3, b.side_mm**3)
    union = a.side_mm**3 + b.side_mm**3 - inter
    return inter / union
