"""Experiment orchestration: config handling and the pipeline stages.

Each stage reads/writes plain artifacts (case directories, manifests,
checkpoints, CSV logs, JSON metrics, SVG plots) and echoes the full
experiment config into its output directory for provenance. Stages are
deterministic given config + seed: identical reruns produce
checksum-identical artifacts.

Scalar config fields can be overridden from the environment with the
``VASCMAE_`` prefix, double underscores separating nesting levels
(``VASCMAE_PRETRAIN__EPOCHS=2``, ``VASCMAE_SEED=7``).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field

from . import evaluation, training
from .evaluation import CasePredictions, FrocCurve, MatchedCase
from .geometry import BoundingCube, signed_distance_map
from .model import (
    AneurysmDetector,
    Checkpoint,
    Detection,
    ModelConfig,
    ensure_config_match,
    load_checkpoint,
    load_model_arrays,
    model_arrays,
    save_checkpoint,
)
from .plots import render_froc_svg
from .synthvasc import (
    Case,
    PhantomParams,
    generate_case,
    read_case,
    read_distance_map,
    read_manifest,
    write_case,
    write_distance_map,
    write_manifest,
)
from .training import FinetuneConfig, PretrainConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "VASCMAE_"
CONFIG_ECHO = "config.json"

ABLATION_VARIANTS = ("A", "D", "E", "F", "G")
REDUCED_VARIANTS = ("A", "G")


class PipelineError(RuntimeError):
    """User-facing pipeline failure (bad inputs, missing artifacts)."""


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


class PhantomSection(BaseModel):
    volume_dims: tuple[int, int, int] = (96, 96, 96)
    spacing_mm: tuple[float, float, float] = (0.4, 0.4, 0.4)
    n_vessels: tuple[int, int] = (6, 10)
    vessel_radius_mm: tuple[float, float] = (1.0, 1.8)
    n_lesions: tuple[int, int] = (1, 3)
    lesion_diameter_mm: tuple[float, float] = (2.5, 8.0)
    noise_std: float = 0.03


class ModelSection(BaseModel):
    depth: int = 2
    dim: int = 64
    heads_spatial: int = 8
    heads_axial: int = 8
    patch: int = 4
    grid: int = 16
    n_queries: int = 8
    decoder_depth: int | None = None
    decoder_dim: int | None = None


class PretrainSection(BaseModel):
    epochs: int = 100
    lr_start: float = 1.5e-3
    lr_end: float = 1.5e-4
    weight_decay: float = 0.05
    batch_size: int = 8
    crops_per_case: int = 4
    mask_ratio: float = 0.75
    mask_beta: float = 1.0
    mask_eps: float = 0.05
    min_artery_frac: float = 0.10
    reconstruct_distance: bool = True
    seed: int | None = None  # defaults to the experiment seed


class FinetuneSection(BaseModel):
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 0.05
    multi_match_radius_mm: float = 1.0
    batch_size: int = 8
    crops_per_case: int = 2
    positive_fraction: float = 0.5
    positive_jitter_vox: int = 16
    min_artery_frac: float = 0.10
    seed: int | None = None


class EvalSection(BaseModel):
    t_iou: float = 0.3
    fpr_budget: float = 0.5
    strata_edges: tuple[float, float] = (3.0, 7.0)
    nms_iou: float = 0.25
    stride: int = 32
    infer_batch: int = 8
    permutation_n: int = 10_000


class ExperimentConfig(BaseModel):
    seed: int
    phantom: PhantomSection = Field(default_factory=PhantomSection)
    model: ModelSection = Field(default_factory=ModelSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    finetune: FinetuneSection = Field(default_factory=FinetuneSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    def to_phantom_params(self) -> PhantomParams:
        p = self.phantom
        return PhantomParams(
            volume_dims=p.volume_dims,
            spacing_mm=p.spacing_mm,
            n_vessels=p.n_vessels,
            vessel_radius_mm=p.vessel_radius_mm,
            n_lesions=p.n_lesions,
            lesion_diameter_mm=p.lesion_diameter_mm,
            noise_std=p.noise_std,
            seed=self.seed,
        )

    def to_model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            depth=m.depth,
            dim=m.dim,
            heads_spatial=m.heads_spatial,
            heads_axial=m.heads_axial,
            patch=m.patch,
            grid=m.grid,
            n_queries=m.n_queries,
            decoder_depth=m.decoder_depth,
            decoder_dim=m.decoder_dim,
        )

    def to_pretrain_config(self) -> PretrainConfig:
        p = self.pretrain
        return PretrainConfig(
            epochs=p.epochs,
            lr_start=p.lr_start,
            lr_end=p.lr_end,
            weight_decay=p.weight_decay,
            batch_size=p.batch_size,
            seed=self.seed if p.seed is None else p.seed,
            crops_per_case=p.crops_per_case,
            mask_ratio=p.mask_ratio,
            mask_beta=p.mask_beta,
            mask_eps=p.mask_eps,
            min_artery_frac=p.min_artery_frac,
            reconstruct_distance=p.reconstruct_distance,
        )

    def to_finetune_config(self) -> FinetuneConfig:
        f = self.finetune
        return FinetuneConfig(
            epochs=f.epochs,
            lr=f.lr,
            weight_decay=f.weight_decay,
            multi_match_radius_mm=f.multi_match_radius_mm,
            batch_size=f.batch_size,
            seed=self.seed if f.seed is None else f.seed,
            crops_per_case=f.crops_per_case,
            positive_fraction=f.positive_fraction,
            positive_jitter_vox=f.positive_jitter_vox,
            min_artery_frac=f.min_artery_frac,
        )


def default_config(seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig(seed=seed)


def _env_overrides(environ) -> dict:
    # Unknown keys are dropped by pydantic's default extra-field handling.
    tree: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = tree
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return tree


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(
    path=None,
    seed: int | None = None,
    environ=None,
) -> ExperimentConfig:
    """Load a JSON experiment config, applying env and CLI seed overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PipelineError(f"cannot read config {path}: {exc}") from exc
    data = _deep_merge(data, _env_overrides(os.environ if environ is None else environ))
    if seed is not None:
        data["seed"] = seed
    if "seed" not in data:
        raise PipelineError("config must specify a seed (or pass --seed)")
    return ExperimentConfig.model_validate(data)


# ---------------------------------------------------------------------------
# Shared artifact helpers
# ---------------------------------------------------------------------------


def _prepare_out_dir(out_dir, force: bool) -> Path:
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise PipelineError(f"{out_dir} already exists; pass force to overwrite")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _echo_config(config: ExperimentConfig, out_dir: Path) -> None:
    (out_dir / CONFIG_ECHO).write_text(config.model_dump_json(indent=2) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def dataset_checksum(manifest_path) -> str:
    """Checksum of the ground-truth sidecars listed in a manifest."""
    h = hashlib.sha256()
    for case_dir in read_manifest(manifest_path):
        h.update((case_dir / "case.json").read_bytes())
    return h.hexdigest()


def load_cases(manifest_path) -> list[tuple[Case, object]]:
    """Load (case, distance map) pairs; maps are computed when not on disk."""
    pairs = []
    for case_dir in read_manifest(manifest_path):
        if not case_dir.is_dir():
            raise PipelineError(f"manifest entry missing on disk: {case_dir}")
        case = read_case(case_dir)
        if (case_dir / "distance.raw").exists():
            dmap = read_distance_map(case_dir)
        else:
            dmap = signed_distance_map(case.artery_mask, case.spacing_mm)
        pairs.append((case, dmap))
    return pairs


def _case_meta(case_dir: Path) -> dict:
    return json.loads((Path(case_dir) / "case.json").read_text())


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


@dataclass
class SynthResult:
    out_dir: Path
    manifest_path: Path
    case_dirs: list[Path]


def _synth_one(params: PhantomParams, index: int, out_root: str) -> str:
    case = generate_case(params, index)
    case_dir = Path(out_root) / case.case_id
    write_case(case, case_dir)
    dmap = signed_distance_map(case.artery_mask, case.spacing_mm)
    write_distance_map(dmap, case_dir)
    return case.case_id


def run_synth(
    config: ExperimentConfig,
    n_cases: int,
    out_dir,
    force: bool = False,
    workers: int = 1,
) -> SynthResult:
    """Generate phantom cases plus distance maps and write a manifest."""
    if n_cases < 1:
        raise PipelineError(f"n_cases must be >= 1, got {n_cases}")
    out_dir = _prepare_out_dir(out_dir, force)
    params = config.to_phantom_params()
    indices = list(range(n_cases))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            names = list(pool.map(_synth_one, [params] * n_cases, indices, [str(out_dir)] * n_cases))
    else:
        names = [_synth_one(params, i, str(out_dir)) for i in indices]
    case_dirs = [out_dir / name for name in sorted(names)]
    manifest_path = out_dir / "manifest.txt"
    write_manifest(case_dirs, manifest_path)
    _echo_config(config, out_dir)
    return SynthResult(out_dir=out_dir, manifest_path=manifest_path, case_dirs=case_dirs)


# ---------------------------------------------------------------------------
# pretrain / finetune
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint_path: Path
    log_path: Path
    final_loss: float
    steps: int


def run_pretrain(config: ExperimentConfig, manifest_path, out_dir, force: bool = False) -> TrainResult:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise PipelineError(f"manifest not found: {manifest_path}")
    out_dir = _prepare_out_dir(out_dir, force)
    cases = load_cases(manifest_path)
    model_cfg = config.to_model_config()
    cfg = config.to_pretrain_config()
    log_path = out_dir / "pretrain_log.csv"
    model, history = training.pretrain(cases, model_cfg, cfg, log_path=log_path)
    checkpoint_path = out_dir / "checkpoint.bin"
    save_checkpoint(
        checkpoint_path,
        kind="mae-pretrain",
        config=model_cfg,
        arrays=model_arrays(model),
        meta={"epochs": cfg.epochs, "seed": cfg.seed},
    )
    _echo_config(config, out_dir)
    if not history:
        raise PipelineError("pre-training produced no steps")
    return TrainResult(out_dir, checkpoint_path, log_path, history[-1][2], len(history))


def run_finetune(
    config: ExperimentConfig,
    manifest_path,
    checkpoint_path,
    out_dir,
    force: bool = False,
) -> TrainResult:
    """Fine-tune from a pre-train checkpoint, or from scratch when
    ``checkpoint_path`` is None."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise PipelineError(f"manifest not found: {manifest_path}")
    pretrained: Checkpoint | None = None
    if checkpoint_path is not None:
        checkpoint_path = Path(checkpoint_path)
        if not checkpoint_path.exists():
            raise PipelineError(f"checkpoint not found: {checkpoint_path}")
        pretrained = load_checkpoint(checkpoint_path)
        if pretrained.kind != "mae-pretrain":
            raise PipelineError(
                f"{checkpoint_path} is a {pretrained.kind!r} checkpoint, expected mae-pretrain"
            )
    out_dir = _prepare_out_dir(out_dir, force)
    cases = load_cases(manifest_path)
    model_cfg = config.to_model_config()
    cfg = config.to_finetune_config()
    log_path = out_dir / "finetune_log.csv"
    detector, history = training.finetune(cases, model_cfg, cfg, pretrained, log_path=log_path)
    model_path = out_dir / "detector.bin"
    save_checkpoint(
        model_path,
        kind="detector",
        config=model_cfg,
        arrays=model_arrays(detector),
        meta={"epochs": cfg.epochs, "seed": cfg.seed, "from_scratch": pretrained is None},
    )
    _echo_config(config, out_dir)
    if not history:
        raise PipelineError("fine-tuning produced no steps")
    return TrainResult(out_dir, model_path, log_path, history[-1][2], len(history))


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


@dataclass
class InferResult:
    out_dir: Path
    predictions_path: Path
    n_cases: int


def _load_detector(model_path, config: ExperimentConfig) -> AneurysmDetector:
    ckpt = load_checkpoint(model_path)
    if ckpt.kind != "detector":
        raise PipelineError(f"{model_path} is a {ckpt.kind!r} checkpoint, expected detector")
    model_cfg = config.to_model_config()
    ensure_config_match(ckpt.config, model_cfg)
    detector = AneurysmDetector(model_cfg)
    load_model_arrays(detector, ckpt.arrays)
    detector.eval()
    return detector


def _infer_chunk(model_path: str, case_dirs: list[str], config_json: str) -> list[dict]:
    config = ExperimentConfig.model_validate_json(config_json)
    detector = _load_detector(model_path, config)
    out = []
    for case_dir in case_dirs:
        case_dir = Path(case_dir)
        case = read_case(case_dir)
        if (case_dir / "distance.raw").exists():
            dmap = read_distance_map(case_dir)
        else:
            dmap = signed_distance_map(case.artery_mask, case.spacing_mm)
        preds = evaluation.sliding_window_infer(
            detector,
            case,
            dmap,
            stride=config.eval.stride,
            nms_iou=config.eval.nms_iou,
            batch_size=config.eval.infer_batch,
        )
        out.append(
            {
                "case_id": preds.case_id,
                "detections": [
                    {
                        "score": d.score,
                        "center_mm": list(d.center_mm),
                        "side_mm": d.side_mm,
                    }
                    for d in preds.detections
                ],
            }
        )
    return out


def run_infer(
    config: ExperimentConfig,
    manifest_path,
    model_path,
    out_dir,
    force: bool = False,
    workers: int = 1,
) -> InferResult:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise PipelineError(f"manifest not found: {manifest_path}")
    model_path = Path(model_path)
    if not model_path.exists():
        raise PipelineError(f"model not found: {model_path}")
    out_dir = _prepare_out_dir(out_dir, force)
    case_dirs = [str(d) for d in read_manifest(manifest_path)]
    config_json = config.model_dump_json()
    if workers > 1:
        chunks = [[str(p) for p in c] for c in np.array_split(case_dirs, workers) if len(c)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(
                _infer_chunk,
                [str(model_path)] * len(chunks),
                chunks,
                [config_json] * len(chunks),
            )
        records = [rec for part in parts for rec in part]
    else:
        records = _infer_chunk(str(model_path), case_dirs, config_json)
    records.sort(key=lambda r: r["case_id"])
    predictions_path = out_dir / "predictions.json"
    predictions_path.write_text(json.dumps(records, indent=2) + "\n")
    _echo_config(config, out_dir)
    return InferResult(out_dir, predictions_path, len(records))


def load_predictions(path) -> dict[str, CasePredictions]:
    try:
        records = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError(f"cannot read predictions {path}: {exc}") from exc
    out = {}
    for rec in records:
        out[rec["case_id"]] = CasePredictions(
            case_id=rec["case_id"],
            detections=[
                Detection(
                    score=float(d["score"]),
                    center_mm=tuple(float(v) for v in d["center_mm"]),
                    side_mm=float(d["side_mm"]),
                )
                for d in rec["detections"]
            ],
        )
    return out


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


@dataclass
class EvalSetSummary:
    label: str
    se_at_fpr: float
    threshold: float
    p_se: float
    p_sp: float | None
    strata: dict[str, float | None]
    n_cases: int
    n_lesions: int


@dataclass
class EvalResult:
    out_dir: Path
    metrics_path: Path
    svg_path: Path
    sets: list[EvalSetSummary]
    p_values: dict[str, float]


def _match_set(
    config: ExperimentConfig, manifest_path, predictions: dict[str, CasePredictions]
) -> list[MatchedCase]:
    matched = []
    for case_dir in read_manifest(manifest_path):
        meta = _case_meta(case_dir)
        case_id = meta["case_id"]
        if case_id not in predictions:
            raise PipelineError(f"predictions missing case {case_id}")
        gts = [
            BoundingCube(tuple(l["center_mm"]), float(l["side_mm"]))
            for l in meta["lesions"]
        ]
        diameters = [float(l["diameter_mm"]) for l in meta["lesions"]]
        matched.append(
            evaluation.match_detections(
                predictions[case_id], gts, diameters, t_iou=config.eval.t_iou
            )
        )
    return matched


def _evaluate_sets(
    config: ExperimentConfig,
    manifest_path,
    labeled_paths: list[tuple[str, Path]],
) -> tuple[list[EvalSetSummary], dict[str, FrocCurve], dict[str, float]]:
    summaries = []
    curves = {}
    hit_vectors = {}
    for label, path in labeled_paths:
        preds = load_predictions(path)
        matched = _match_set(config, manifest_path, preds)
        curve = evaluation.froc(matched)
        se, threshold = evaluation.operating_point(curve, config.eval.fpr_budget)
        p_se, p_sp = evaluation.patient_metrics(matched, threshold)
        strata = evaluation.strata_sensitivity(matched, threshold, config.eval.strata_edges)
        curves[label] = curve
        hit_vectors[label] = evaluation.lesion_hit_vector(matched, threshold)
        summaries.append(
            EvalSetSummary(
                label=label,
                se_at_fpr=se,
                threshold=threshold,
                p_se=p_se,
                p_sp=p_sp,
                strata=strata,
                n_cases=len(matched),
                n_lesions=int(sum(len(m.gt_diameters) for m in matched)),
            )
        )
    p_values = {}
    for i in range(len(summaries)):
        for j in range(i + 1, len(summaries)):
            a, b = summaries[i].label, summaries[j].label
            p_values[f"{a}_vs_{b}"] = evaluation.permutation_test(
                hit_vectors[a],
                hit_vectors[b],
                n_perm=config.eval.permutation_n,
                seed=config.seed,
            )
    return summaries, curves, p_values


def _safe_label(label: str) -> str:
    cleaned = "".join(c if c.isalnum() or c in "-_." else "_" for c in label)
    return cleaned or "set"


def run_eval(
    config: ExperimentConfig,
    manifest_path,
    predictions: list[tuple[str, Path]],
    out_dir,
    force: bool = False,
) -> EvalResult:
    """Score one or more prediction sets against a ground-truth manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise PipelineError(f"manifest not found: {manifest_path}")
    if not predictions:
        raise PipelineError("at least one predictions file is required")
    labels = [label for label, _ in predictions]
    if len(set(labels)) != len(labels):
        raise PipelineError(f"prediction set labels must be unique, got {labels}")
    for _, path in predictions:
        if not Path(path).exists():
            raise PipelineError(f"predictions file not found: {path}")
    out_dir = _prepare_out_dir(out_dir, force)
    summaries, curves, p_values = _evaluate_sets(config, manifest_path, predictions)

    metrics = {
        "fpr_budget": config.eval.fpr_budget,
        "t_iou": config.eval.t_iou,
        "dataset_checksum": dataset_checksum(manifest_path),
        "sets": {
            s.label: {
                "se_at_fpr": s.se_at_fpr,
                "threshold": s.threshold if np.isfinite(s.threshold) else None,
                "p_se": s.p_se,
                "p_sp": s.p_sp,
                "strata": s.strata,
                "n_cases": s.n_cases,
                "n_lesions": s.n_lesions,
            }
            for s in summaries
        },
        "p_values": p_values,
    }
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")

    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["label", "se_at_fpr", "threshold", "p_se", "p_sp", "se_small", "se_medium", "se_large"]
        )
        for s in summaries:
            writer.writerow(
                [
                    s.label,
                    s.se_at_fpr,
                    s.threshold,
                    s.p_se,
                    s.p_sp,
                    s.strata["small"],
                    s.strata["medium"],
                    s.strata["large"],
                ]
            )
    for label, curve in curves.items():
        with open(out_dir / f"froc_{_safe_label(label)}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "fpr", "se"])
            for t, f, s in zip(curve.thresholds, curve.fpr, curve.se):
                writer.writerow([t, f, s])
    svg_path = out_dir / "froc.svg"
    svg_path.write_text(render_froc_svg(curves))
    _echo_config(config, out_dir)
    return EvalResult(out_dir, metrics_path, svg_path, summaries, p_values)


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


@dataclass
class AblateResult:
    out_dir: Path
    report_path: Path
    table: dict[str, dict]
    p_values: dict[str, float]


def variant_config(config: ExperimentConfig, variant: str) -> ExperimentConfig:
    """Derive the pre-training recipe for one ablation variant.

    A: full recipe; D: no distance-map reconstruction; E: unbiased masking;
    F: unconstrained crop sampling; G: no pre-training at all.
    """
    if variant not in ABLATION_VARIANTS:
        raise PipelineError(f"unknown ablation variant {variant!r}")
    cfg = config.model_copy(deep=True)
    if variant == "D":
        cfg.pretrain.reconstruct_distance = False
    elif variant == "E":
        cfg.pretrain.mask_beta = 0.0
    elif variant == "F":
        cfg.pretrain.min_artery_frac = 0.0
    return cfg


def run_ablate(
    config: ExperimentConfig,
    train_manifest,
    eval_manifest,
    out_dir,
    force: bool = False,
    reduced: bool = False,
) -> AblateResult:
    """Train and evaluate the design-choice variants under identical budgets.

    Every variant shares the seed, the training manifest, and the evaluation
    manifest; the report records the eval-set checksum per variant as a
    fairness guard.
    """
    train_manifest = Path(train_manifest)
    eval_manifest = Path(eval_manifest)
    for m in (train_manifest, eval_manifest):
        if not m.exists():
            raise PipelineError(f"manifest not found: {m}")
    out_dir = _prepare_out_dir(out_dir, force)
    variants = REDUCED_VARIANTS if reduced else ABLATION_VARIANTS
    if reduced:
        logger.warning("reduced compute budget: running variants %s only", list(variants))

    eval_checksum = dataset_checksum(eval_manifest)
    prediction_paths: list[tuple[str, Path]] = []
    for variant in variants:
        vcfg = variant_config(config, variant)
        vdir = out_dir / f"variant_{variant}"
        vdir.mkdir(parents=True)
        checkpoint = None
        if variant != "G":
            pre = run_pretrain(vcfg, train_manifest, vdir / "pretrain")
            checkpoint = pre.checkpoint_path
        fin = run_finetune(vcfg, train_manifest, checkpoint, vdir / "finetune")
        inf = run_infer(vcfg, eval_manifest, fin.checkpoint_path, vdir / "infer")
        prediction_paths.append((variant, inf.predictions_path))

    summaries, curves, p_values = _evaluate_sets(config, eval_manifest, prediction_paths)
    table = {
        s.label: {
            "se_at_fpr": s.se_at_fpr,
            "p_se": s.p_se,
            "p_sp": s.p_sp,
            "threshold": s.threshold if np.isfinite(s.threshold) else None,
            "eval_checksum": eval_checksum,
        }
        for s in summaries
    }
    report = {
        "variant_order": list(variants),
        "fpr_budget": config.eval.fpr_budget,
        "variants": table,
        "p_values": p_values,
    }
    report_path = out_dir / "ablation_report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(out_dir / "ablation_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "se_at_fpr", "p_se", "p_sp", "eval_checksum"])
        for variant in variants:
            row = table[variant]
            writer.writerow([variant, row["se_at_fpr"], row["p_se"], row["p_sp"], row["eval_checksum"]])
    (out_dir / "froc.svg").write_text(render_froc_svg(curves))
    _echo_config(config, out_dir)
    return AblateResult(out_dir, report_path, table, p_values)
