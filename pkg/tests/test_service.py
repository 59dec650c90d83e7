import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from vascmae.pipeline import ExperimentConfig, default_config
from vascmae.service import create_app


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


def micro_config(seed=21) -> dict:
    """Smallest full-pipeline configuration that still trains."""
    cfg = default_config(seed=seed).model_copy(deep=True)
    cfg.phantom.volume_dims = (64, 64, 64)
    cfg.phantom.n_vessels = (6, 8)
    cfg.phantom.vessel_radius_mm = (1.3, 2.0)
    cfg.model.depth = 1
    cfg.model.dim = 12
    cfg.model.heads_spatial = 4
    cfg.model.heads_axial = 4
    cfg.pretrain.epochs = 1
    cfg.pretrain.crops_per_case = 1
    cfg.pretrain.batch_size = 2
    cfg.finetune.epochs = 1
    cfg.finetune.crops_per_case = 1
    cfg.finetune.batch_size = 2
    cfg.eval.permutation_n = 200
    return json.loads(cfg.model_dump_json())


class TestMeta:
    def test_health(self, client):
        reply = client.get("/health")
        assert reply.status_code == 200
        assert reply.json()["status"] == "ok"

    def test_default_config_roundtrips(self, client):
        reply = client.get("/config/default", params={"seed": 5})
        assert reply.status_code == 200
        cfg = ExperimentConfig.model_validate(reply.json())
        assert cfg.seed == 5
        assert cfg.pretrain.lr_start == pytest.approx(1.5e-3)
        assert cfg.finetune.lr == pytest.approx(1e-4)

    def test_validation_errors_are_422(self, client):
        reply = client.post("/synth", json={"n_cases": 0, "out_dir": "/tmp/x"})
        assert reply.status_code == 422

    def test_conflicting_config_sources_rejected(self, client, tmp_path):
        reply = client.post(
            "/synth",
            json={
                "n_cases": 1,
                "out_dir": str(tmp_path / "o"),
                "config": micro_config(),
                "config_path": "whatever.json",
            },
        )
        assert reply.status_code == 422


class TestPipelineEndpoints:
    @pytest.fixture(scope="class")
    def workspace(self, tmp_path_factory, client):
        root = tmp_path_factory.mktemp("svc")
        cfg = micro_config()
        reply = client.post(
            "/synth",
            json={"config": cfg, "n_cases": 3, "out_dir": str(root / "data")},
        )
        assert reply.status_code == 200, reply.text
        return root, cfg, reply.json()

    def test_synth_manifest_lines_match_cases(self, workspace):
        root, _, synth = workspace
        assert synth["n_cases"] == 3
        lines = (root / "data" / "manifest.txt").read_text().splitlines()
        assert len(lines) == 3

    def test_synth_refuses_overwrite_without_force(self, client, workspace):
        root, cfg, _ = workspace
        reply = client.post(
            "/synth", json={"config": cfg, "n_cases": 1, "out_dir": str(root / "data")}
        )
        assert reply.status_code == 400
        assert "force" in reply.json()["detail"]

    def test_full_chain(self, client, workspace):
        root, cfg, synth = workspace
        manifest = synth["manifest_path"]

        reply = client.post(
            "/pretrain",
            json={"config": cfg, "manifest_path": manifest, "out_dir": str(root / "pre")},
        )
        assert reply.status_code == 200, reply.text
        pre = reply.json()
        assert pre["steps"] >= 1

        reply = client.post(
            "/finetune",
            json={
                "config": cfg,
                "manifest_path": manifest,
                "checkpoint_path": pre["checkpoint_path"],
                "out_dir": str(root / "fin"),
            },
        )
        assert reply.status_code == 200, reply.text
        fin = reply.json()

        reply = client.post(
            "/infer",
            json={
                "config": cfg,
                "manifest_path": manifest,
                "model_path": fin["checkpoint_path"],
                "out_dir": str(root / "inf"),
            },
        )
        assert reply.status_code == 200, reply.text
        inf = reply.json()
        assert inf["n_cases"] == 3
        records = json.loads((root / "inf" / "predictions.json").read_text())
        assert len(records) == 3
        assert all({"score", "center_mm", "side_mm"} <= set(d) for r in records for d in r["detections"])

        reply = client.post(
            "/eval",
            json={
                "config": cfg,
                "manifest_path": manifest,
                "predictions": [
                    {"label": "a", "path": inf["predictions_path"]},
                    {"label": "b", "path": inf["predictions_path"]},
                ],
                "out_dir": str(root / "ev"),
            },
        )
        assert reply.status_code == 200, reply.text
        ev = reply.json()
        assert {s["label"] for s in ev["sets"]} == {"a", "b"}
        # Identical prediction sets: identical hit vectors, so p = 1.
        assert ev["p_values"]["a_vs_b"] == 1.0
        metrics = json.loads((root / "ev" / "metrics.json").read_text())
        assert set(metrics["sets"]) == {"a", "b"}
        assert (root / "ev" / "froc.svg").exists()
        assert (root / "ev" / "froc_a.csv").read_text().splitlines()[0] == "threshold,fpr,se"

    def test_finetune_requires_checkpoint_or_scratch_flag(self, client, workspace):
        root, cfg, synth = workspace
        reply = client.post(
            "/finetune",
            json={
                "config": cfg,
                "manifest_path": synth["manifest_path"],
                "out_dir": str(root / "fin2"),
            },
        )
        assert reply.status_code == 422

    def test_infer_with_missing_model_is_400(self, client, workspace):
        root, cfg, synth = workspace
        reply = client.post(
            "/infer",
            json={
                "config": cfg,
                "manifest_path": synth["manifest_path"],
                "model_path": str(root / "nope.bin"),
                "out_dir": str(root / "inf2"),
            },
        )
        assert reply.status_code == 400


class TestOraclePredictionsEval:
    def test_oracle_curve_pins_full_sensitivity(self, client, tmp_path):
        cfg = micro_config(seed=31)
        reply = client.post(
            "/synth", json={"config": cfg, "n_cases": 2, "out_dir": str(tmp_path / "d")}
        )
        assert reply.status_code == 200
        manifest = reply.json()["manifest_path"]

        # Oracle predictions: every ground-truth cube at score 1, nothing else.
        records = []
        for line in (tmp_path / "d" / "manifest.txt").read_text().splitlines():
            meta = json.loads((tmp_path / "d" / line / "case.json").read_text())
            records.append(
                {
                    "case_id": meta["case_id"],
                    "detections": [
                        {"score": 1.0, "center_mm": l["center_mm"], "side_mm": l["side_mm"]}
                        for l in meta["lesions"]
                    ],
                }
            )
        oracle_path = tmp_path / "oracle.json"
        oracle_path.write_text(json.dumps(records))

        reply = client.post(
            "/eval",
            json={
                "config": cfg,
                "manifest_path": manifest,
                "predictions": [{"label": "oracle", "path": str(oracle_path)}],
                "out_dir": str(tmp_path / "ev"),
            },
        )
        assert reply.status_code == 200, reply.text
        ev = reply.json()
        assert ev["sets"][0]["se_at_fpr"] == 1.0
        assert ev["sets"][0]["p_se"] == 1.0

        # The rendered SVG pins a point at (fpr=0, se=1).
        from vascmae.plots import svg_point

        svg = (tmp_path / "ev" / "froc.svg").read_text()
        x, y = svg_point(0.0, 1.0)
        assert f'cx="{x:.2f}" cy="{y:.2f}"' in svg
