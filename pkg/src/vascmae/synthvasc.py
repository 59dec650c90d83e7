"""Deterministic synthetic 3D vascular phantoms with aneurysm-like bulges.

A phantom is a stack of smooth random tubes (piecewise-cubic centerlines
with continuously varying radius) plus optional spherical lesions whose
centres lie on a vessel centerline. Lesions share the vessel intensity
band on purpose, so detection cannot shortcut on intensity alone. Vessels
are steered through the central region of the volume so that 64-cube crops
with a sizeable artery fraction exist.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DistanceMap

VOLUME_DTYPE = np.dtype("<f4")
MASK_DTYPE = np.dtype("uint8")

BACKGROUND_INTENSITY = 0.08
VESSEL_INTENSITY_BAND = (0.65, 0.90)

CASE_SIDECAR = "case.json"
VOLUME_FILE = "volume.raw"
ARTERY_FILE = "artery.raw"
DISTANCE_FILE = "distance.raw"
DISTANCE_SIDECAR = "distance.json"


class PhantomGenerationError(RuntimeError):
    pass


class CaseFormatError(RuntimeError):
    """Raised when an on-disk case does not match its sidecar."""


@dataclass(frozen=True)
class LesionGT:
    """Ground-truth lesion: tight bounding cube plus diameter."""

    center_mm: tuple[float, float, float]
    side_mm: float
    diameter_mm: float


@dataclass
class Case:
    case_id: str
    volume: np.ndarray
    artery_mask: np.ndarray
    spacing_mm: tuple[float, float, float]
    lesions: list[LesionGT] = field(default_factory=list)

    @property
    def is_healthy(self) -> bool:
        return len(self.lesions) == 0

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.volume.shape)


@dataclass(frozen=True)
class PhantomParams:
    volume_dims: tuple[int, int, int] = (96, 96, 96)
    spacing_mm: tuple[float, float, float] = (0.4, 0.4, 0.4)
    n_vessels: tuple[int, int] = (6, 10)
    vessel_radius_mm: tuple[float, float] = (1.0, 1.8)
    n_lesions: tuple[int, int] = (1, 3)
    lesion_diameter_mm: tuple[float, float] = (2.5, 8.0)
    noise_std: float = 0.03
    seed: int = 0

    def validate(self) -> None:
        if any(d < 64 for d in self.volume_dims):
            raise PhantomGenerationError(
                f"volume dims {self.volume_dims} too small: every axis must be "
                f">= 64 to admit one crop"
            )
        for name, rng in (
            ("n_vessels", self.n_vessels),
            ("vessel_radius_mm", self.vessel_radius_mm),
            ("n_lesions", self.n_lesions),
            ("lesion_diameter_mm", self.lesion_diameter_mm),
        ):
            if rng[1] < rng[0]:
                raise PhantomGenerationError(f"empty range for {name}: {rng}")
        if self.vessel_radius_mm[0] <= 0 or self.lesion_diameter_mm[0] <= 0:
            raise PhantomGenerationError("radius and diameter ranges must be positive")
        if self.n_vessels[0] < 1:
            raise PhantomGenerationError("need at least one vessel")


def _catmull_rom(points: np.ndarray, n_samples: int) -> np.ndarray:
    """Sample a centripetal-ish Catmull-Rom spline through control points.

    Returns ``n_samples`` positions along a C1 piecewise-cubic curve that
    interpolates every control point.
    """
    k = len(points)
    padded = np.vstack([2 * points[0] - points[1], points, 2 * points[-1] - points[-2]])
    t = np.linspace(0.0, k - 1, n_samples)
    seg = np.clip(t.astype(int), 0, k - 2)
    u = (t - seg)[:, None]
    p0, p1, p2, p3 = (padded[seg + i] for i in range(4))
    return 0.5 * (
        2 * p1
        + (-p0 + p2) * u
        + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u**2
        + (-p0 + 3 * p1 - 3 * p2 + p3) * u**3
    )


def _stamp_ball(mask, volume, center_vox, radius_mm, spacing, intensity):
    """Mark voxels within radius_mm (world units) of a point as vessel."""
    dims = mask.shape
    radius_vox = radius_mm / spacing
    lo = np.maximum(np.floor(center_vox - radius_vox).astype(int), 0)
    hi = np.minimum(np.ceil(center_vox + radius_vox).astype(int) + 1, dims)
    if (hi <= lo).any():
        return
    zz, yy, xx = np.ogrid[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    d2 = (
        ((zz - center_vox[0]) * spacing[0]) ** 2
        + ((yy - center_vox[1]) * spacing[1]) ** 2
        + ((xx - center_vox[2]) * spacing[2]) ** 2
    )
    inside = d2 <= radius_mm**2
    region = (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(lo[2], hi[2]))
    mask[region] |= inside
    np.maximum(volume[region], np.where(inside, intensity, 0.0), out=volume[region])


def generate_case(params: PhantomParams, case_index: int) -> Case:
    """Generate one phantom, fully determined by (params.seed, case_index)."""
    params.validate()
    rng = np.random.default_rng([params.seed, case_index])
    dims = np.asarray(params.volume_dims)
    spacing = np.asarray(params.spacing_mm)

    volume = np.zeros(tuple(dims), dtype=np.float64)
    mask = np.zeros(tuple(dims), dtype=bool)

    # Control points stay inside the central band so vessels cluster enough
    # for the 10%-artery crop constraint to be satisfiable.
    margin = np.minimum(dims * 0.18, (dims - 64) / 2 + dims * 0.12)
    lo_ctrl, hi_ctrl = margin, dims - 1 - margin

    centerlines = []
    n_vessels = int(rng.integers(params.n_vessels[0], params.n_vessels[1] + 1))
    for _ in range(n_vessels):
        ctrl = rng.uniform(lo_ctrl, hi_ctrl, size=(5, 3))
        # Stretch endpoints apart so tubes traverse the core region.
        ctrl[0] = lo_ctrl + (hi_ctrl - lo_ctrl) * rng.uniform(0.0, 0.25, 3)
        ctrl[-1] = lo_ctrl + (hi_ctrl - lo_ctrl) * rng.uniform(0.75, 1.0, 3)
        base_r = rng.uniform(*params.vessel_radius_mm)
        wobble = rng.uniform(0.8, 1.2)
        phase = rng.uniform(0, 2 * np.pi)
        intensity = rng.uniform(*VESSEL_INTENSITY_BAND)

        path = _catmull_rom(ctrl, 400)
        step_mm = float(np.min(spacing)) * 0.6
        keep = [0]
        acc = 0.0
        deltas = np.linalg.norm(np.diff(path, axis=0) * spacing, axis=1)
        for i, d in enumerate(deltas):
            acc += d
            if acc >= step_mm:
                keep.append(i + 1)
                acc = 0.0
        path = path[keep]
        ts = np.linspace(0, 1, len(path))
        radii_mm = base_r * (1.0 + 0.2 * np.sin(wobble * 2 * np.pi * ts + phase))

        for point, r_mm in zip(path, radii_mm):
            _stamp_ball(mask, volume, point, r_mm, spacing, intensity)
        centerlines.append(path)

    if not mask.any():
        raise PhantomGenerationError("no vessel voxels rasterized; dims too small")

    # Lesions: spheres centred on a vessel centerline, kept inside bounds and
    # apart from each other, rasterized into both channels.
    lesions: list[LesionGT] = []
    n_lesions = int(rng.integers(params.n_lesions[0], params.n_lesions[1] + 1))
    for _ in range(n_lesions):
        for _attempt in range(200):
            vessel = centerlines[int(rng.integers(len(centerlines)))]
            center_vox = vessel[int(rng.integers(len(vessel)))]
            diameter = float(rng.uniform(*params.lesion_diameter_mm))
            center_mm = center_vox * spacing
            half = diameter / 2.0
            if (center_mm - half < 0).any() or (
                center_mm + half > (dims - 1) * spacing
            ).any():
                continue
            if any(
                np.linalg.norm(center_mm - np.asarray(prev.center_mm))
                < (diameter + prev.diameter_mm) / 2.0
                for prev in lesions
            ):
                continue
            intensity = rng.uniform(*VESSEL_INTENSITY_BAND)
            _stamp_ball(mask, volume, center_vox, half, spacing, intensity)
            lesions.append(
                LesionGT(
                    center_mm=tuple(center_mm.tolist()),
                    side_mm=diameter,
                    diameter_mm=diameter,
                )
            )
            break

    volume += BACKGROUND_INTENSITY
    if params.noise_std > 0:
        volume += params.noise_std * rng.standard_normal(volume.shape)
    volume = np.clip(volume, 0.0, 1.0).astype(np.float32)

    return Case(
        case_id=f"case_{case_index:04d}",
        volume=volume,
        artery_mask=mask,
        spacing_mm=tuple(float(s) for s in spacing),
        lesions=lesions,
    )


# ---------------------------------------------------------------------------
# On-disk case format: case.json sidecar + volume.raw (LE float32, z-major)
# + artery.raw (uint8). Distance maps use the same raw layout.
# ---------------------------------------------------------------------------


def _write_raw(path: Path, array: np.ndarray, dtype: np.dtype) -> None:
    path.write_bytes(np.ascontiguousarray(array, dtype=dtype).tobytes())


def _read_raw(path: Path, dims: tuple[int, int, int], dtype: np.dtype) -> np.ndarray:
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = path.read_bytes()
    if len(payload) != expected:
        raise CaseFormatError(
            f"{path.name}: expected {expected} bytes for dims {tuple(dims)} "
            f"({dtype.str}), got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims)


def write_case(case: Case, directory) -> Path:
    """Write a case directory; returns the sidecar path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sidecar = {
        "case_id": case.case_id,
        "dims": list(case.dims),
        "spacing_mm": list(case.spacing_mm),
        "is_healthy": case.is_healthy,
        "lesions": [
            {
                "center_mm": list(l.center_mm),
                "side_mm": l.side_mm,
                "diameter_mm": l.diameter_mm,
            }
            for l in case.lesions
        ],
    }
    (directory / CASE_SIDECAR).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    _write_raw(directory / VOLUME_FILE, case.volume, VOLUME_DTYPE)
    _write_raw(directory / ARTERY_FILE, case.artery_mask.astype(np.uint8), MASK_DTYPE)
    return directory / CASE_SIDECAR


def read_case(directory) -> Case:
    directory = Path(directory)
    sidecar_path = directory / CASE_SIDECAR
    try:
        sidecar = json.loads(sidecar_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CaseFormatError(f"unreadable sidecar {sidecar_path}: {exc}") from exc
    try:
        dims = tuple(int(d) for d in sidecar["dims"])
        spacing = tuple(float(s) for s in sidecar["spacing_mm"])
        case_id = str(sidecar["case_id"])
        lesions = [
            LesionGT(
                center_mm=tuple(float(v) for v in l["center_mm"]),
                side_mm=float(l["side_mm"]),
                diameter_mm=float(l["diameter_mm"]),
            )
            for l in sidecar["lesions"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseFormatError(f"malformed sidecar {sidecar_path}: {exc}") from exc
    if len(dims) != 3:
        raise CaseFormatError(f"sidecar dims must have 3 axes, got {sidecar['dims']}")
    volume = _read_raw(directory / VOLUME_FILE, dims, VOLUME_DTYPE)
    mask = _read_raw(directory / ARTERY_FILE, dims, MASK_DTYPE).astype(bool)
    case = Case(
        case_id=case_id,
        volume=volume,
        artery_mask=mask,
        spacing_mm=spacing,
        lesions=lesions,
    )
    if bool(sidecar.get("is_healthy")) != case.is_healthy:
        raise CaseFormatError(
            f"{sidecar_path}: is_healthy flag disagrees with lesion list"
        )
    return case


def write_distance_map(dmap: DistanceMap, directory) -> None:
    directory = Path(directory)
    meta = {
        "dims": list(dmap.values.shape),
        "spacing_mm": list(dmap.spacing_mm),
        "has_foreground": dmap.has_foreground,
    }
    (directory / DISTANCE_SIDECAR).write_text(json.dumps(meta, indent=2, sort_keys=True))
    _write_raw(directory / DISTANCE_FILE, dmap.values, VOLUME_DTYPE)


def read_distance_map(directory) -> DistanceMap:
    directory = Path(directory)
    try:
        meta = json.loads((directory / DISTANCE_SIDECAR).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CaseFormatError(f"unreadable distance sidecar in {directory}: {exc}") from exc
    dims = tuple(int(d) for d in meta["dims"])
    values = _read_raw(directory / DISTANCE_FILE, dims, VOLUME_DTYPE)
    return DistanceMap(
        values=values,
        spacing_mm=tuple(float(s) for s in meta["spacing_mm"]),
        has_foreground=bool(meta["has_foreground"]),
    )


def write_manifest(case_dirs: list[Path], manifest_path: Path) -> None:
    """Newline-delimited case-directory paths relative to the manifest."""
    manifest_path = Path(manifest_path)
    rels = [str(Path(d).resolve().relative_to(manifest_path.parent.resolve())) for d in case_dirs]
    manifest_path.write_text("".join(r + "\n" for r in rels))


def read_manifest(manifest_path) -> list[Path]:
    manifest_path = Path(manifest_path)
    lines = [ln.strip() for ln in manifest_path.read_text().splitlines() if ln.strip()]
    return [manifest_path.parent / ln for ln in lines]
