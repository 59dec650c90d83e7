import json

import numpy as np
import pytest

from vascmae.synthvasc import (
    Case,
    CaseFormatError,
    LesionGT,
    PhantomGenerationError,
    PhantomParams,
    generate_case,
    read_case,
    read_distance_map,
    read_manifest,
    write_case,
    write_distance_map,
    write_manifest,
)
from vascmae.geometry import signed_distance_map

FAST = PhantomParams(
    volume_dims=(64, 64, 64),
    n_vessels=(3, 5),
    vessel_radius_mm=(0.9, 1.4),
    n_lesions=(2, 4),
    lesion_diameter_mm=(3.0, 7.0),
    seed=42,
)


class TestGenerateCase:
    def test_deterministic(self):
        a = generate_case(FAST, 5)
        b = generate_case(FAST, 5)
        assert a.case_id == b.case_id
        assert np.array_equal(a.volume, b.volume)
        assert np.array_equal(a.artery_mask, b.artery_mask)
        assert a.lesions == b.lesions

    def test_different_indices_differ(self):
        a = generate_case(FAST, 0)
        b = generate_case(FAST, 1)
        assert not np.array_equal(a.volume, b.volume)

    def test_zero_lesion_range_gives_healthy_case(self):
        params = PhantomParams(
            volume_dims=(64, 64, 64), n_lesions=(0, 0), seed=1
        )
        case = generate_case(params, 0)
        assert case.is_healthy
        assert case.lesions == []

    def test_rejects_small_dims(self):
        with pytest.raises(PhantomGenerationError, match=">= 64"):
            generate_case(PhantomParams(volume_dims=(32, 64, 64)), 0)

    def test_rejects_empty_range(self):
        with pytest.raises(PhantomGenerationError, match="empty range"):
            generate_case(PhantomParams(n_vessels=(5, 3)), 0)

    def test_volume_normalized(self):
        case = generate_case(FAST, 2)
        assert case.volume.dtype == np.float32
        assert case.volume.min() >= 0.0 and case.volume.max() <= 1.0

    def test_lesion_anatomical_attachment_and_containment(self):
        # Every generated lesion centre must fall within one voxel of artery
        # foreground, and its cube must lie inside the volume.
        spacing = np.asarray(FAST.spacing_mm)
        n_lesions = 0
        index = 0
        while n_lesions < 1000:
            case = generate_case(FAST, index)
            index += 1
            bounds_mm = (np.asarray(case.dims) - 1) * spacing
            for lesion in case.lesions:
                n_lesions += 1
                center_vox = np.round(np.asarray(lesion.center_mm) / spacing).astype(int)
                lo = np.maximum(center_vox - 1, 0)
                hi = np.minimum(center_vox + 2, case.dims)
                neighborhood = case.artery_mask[
                    lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]
                ]
                assert neighborhood.any(), f"lesion off-artery in case {index - 1}"
                half = lesion.side_mm / 2
                assert (np.asarray(lesion.center_mm) - half >= 0).all()
                assert (np.asarray(lesion.center_mm) + half <= bounds_mm).all()
                assert lesion.side_mm >= lesion.diameter_mm * (1 - 1e-9)


class TestCaseIO:
    def test_round_trip_bit_exact(self, tmp_path):
        case = generate_case(FAST, 3)
        write_case(case, tmp_path / "c")
        loaded = read_case(tmp_path / "c")
        assert loaded.case_id == case.case_id
        assert loaded.spacing_mm == case.spacing_mm
        assert np.array_equal(loaded.volume, case.volume)
        assert np.array_equal(loaded.artery_mask, case.artery_mask)
        assert loaded.lesions == case.lesions
        assert loaded.is_healthy == case.is_healthy

    def test_truncated_payload_reports_byte_counts(self, tmp_path):
        case = generate_case(FAST, 3)
        write_case(case, tmp_path / "c")
        raw = (tmp_path / "c" / "volume.raw").read_bytes()
        (tmp_path / "c" / "volume.raw").write_bytes(raw[:-100])
        with pytest.raises(CaseFormatError, match=rf"expected {len(raw)} bytes .* got {len(raw) - 100}"):
            read_case(tmp_path / "c")

    def test_sidecar_payload_byte_arithmetic(self, tmp_path):
        # A 64^3 float32 volume is exactly 64^3 * 4 = 1,048,576 bytes.
        d = tmp_path / "c"
        d.mkdir()
        sidecar = {
            "case_id": "manual",
            "dims": [64, 64, 64],
            "spacing_mm": [0.4, 0.4, 0.4],
            "is_healthy": True,
            "lesions": [],
        }
        (d / "case.json").write_text(json.dumps(sidecar))
        assert 64**3 * 4 == 1_048_576
        (d / "volume.raw").write_bytes(bytes(1_048_576))
        (d / "artery.raw").write_bytes(bytes(64**3))
        case = read_case(d)
        assert case.dims == (64, 64, 64)

    def test_dim_mismatch_rejected(self, tmp_path):
        case = generate_case(FAST, 3)
        write_case(case, tmp_path / "c")
        sidecar = json.loads((tmp_path / "c" / "case.json").read_text())
        sidecar["dims"] = [32, 64, 64]
        (tmp_path / "c" / "case.json").write_text(json.dumps(sidecar))
        with pytest.raises(CaseFormatError):
            read_case(tmp_path / "c")

    def test_malformed_sidecar(self, tmp_path):
        d = tmp_path / "c"
        d.mkdir()
        (d / "case.json").write_text("{not json")
        with pytest.raises(CaseFormatError, match="unreadable sidecar"):
            read_case(d)

    def test_inconsistent_healthy_flag(self, tmp_path):
        case = generate_case(FAST, 3)
        write_case(case, tmp_path / "c")
        sidecar = json.loads((tmp_path / "c" / "case.json").read_text())
        sidecar["is_healthy"] = not sidecar["is_healthy"]
        (tmp_path / "c" / "case.json").write_text(json.dumps(sidecar))
        with pytest.raises(CaseFormatError, match="is_healthy"):
            read_case(tmp_path / "c")

    def test_distance_map_round_trip(self, tmp_path):
        case = generate_case(FAST, 1)
        dmap = signed_distance_map(case.artery_mask, case.spacing_mm)
        d = tmp_path / "c"
        d.mkdir()
        write_distance_map(dmap, d)
        loaded = read_distance_map(d)
        assert np.array_equal(loaded.values, dmap.values)
        assert loaded.has_foreground == dmap.has_foreground

    def test_manifest_round_trip(self, tmp_path):
        dirs = [tmp_path / "a", tmp_path / "sub" / "b"]
        for d in dirs:
            d.mkdir(parents=True)
        manifest = tmp_path / "manifest.txt"
        write_manifest(dirs, manifest)
        assert read_manifest(manifest) == [tmp_path / "a", tmp_path / "sub" / "b"]
