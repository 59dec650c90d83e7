"""FastAPI service wrapping the pipeline stages.

Handlers are plain functions over the request models; the CLI calls them
in-process and the HTTP endpoints delegate to them, so both clients run
the exact same code path. Stages execute synchronously (desk scale).
"""

from __future__ import annotations

import math
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..pipeline import (
    ExperimentConfig,
    PipelineError,
    load_config,
    run_ablate,
    run_eval,
    run_finetune,
    run_infer,
    run_pretrain,
    run_synth,
)
from . import schemas


def _resolve_config(request: schemas.StageRequest) -> ExperimentConfig:
    if request.config is not None:
        config = request.config
        if request.seed is not None:
            config = config.model_copy(update={"seed": request.seed})
        return config
    return load_config(request.config_path, seed=request.seed)


def handle_synth(request: schemas.SynthRequest) -> schemas.SynthResponse:
    config = _resolve_config(request)
    result = run_synth(
        config, request.n_cases, request.out_dir, force=request.force, workers=request.workers
    )
    return schemas.SynthResponse(
        out_dir=str(result.out_dir),
        manifest_path=str(result.manifest_path),
        n_cases=len(result.case_dirs),
    )


def _train_response(result) -> schemas.TrainResponse:
    return schemas.TrainResponse(
        out_dir=str(result.out_dir),
        checkpoint_path=str(result.checkpoint_path),
        log_path=str(result.log_path),
        final_loss=result.final_loss,
        steps=result.steps,
    )


def handle_pretrain(request: schemas.PretrainRequest) -> schemas.TrainResponse:
    config = _resolve_config(request)
    return _train_response(
        run_pretrain(config, request.manifest_path, request.out_dir, force=request.force)
    )


def handle_finetune(request: schemas.FinetuneRequest) -> schemas.TrainResponse:
    config = _resolve_config(request)
    return _train_response(
        run_finetune(
            config,
            request.manifest_path,
            request.checkpoint_path,
            request.out_dir,
            force=request.force,
        )
    )


def handle_infer(request: schemas.InferRequest) -> schemas.InferResponse:
    config = _resolve_config(request)
    result = run_infer(
        config,
        request.manifest_path,
        request.model_path,
        request.out_dir,
        force=request.force,
        workers=request.workers,
    )
    return schemas.InferResponse(
        out_dir=str(result.out_dir),
        predictions_path=str(result.predictions_path),
        n_cases=result.n_cases,
    )


def handle_eval(request: schemas.EvalRequest) -> schemas.EvalResponse:
    config = _resolve_config(request)
    result = run_eval(
        config,
        request.manifest_path,
        [(p.label, Path(p.path)) for p in request.predictions],
        request.out_dir,
        force=request.force,
    )
    return schemas.EvalResponse(
        out_dir=str(result.out_dir),
        metrics_path=str(result.metrics_path),
        svg_path=str(result.svg_path),
        sets=[
            schemas.EvalSetMetrics(
                label=s.label,
                se_at_fpr=s.se_at_fpr,
                threshold=None if math.isinf(s.threshold) else s.threshold,
                p_se=s.p_se,
                p_sp=s.p_sp,
                strata=s.strata,
                n_cases=s.n_cases,
                n_lesions=s.n_lesions,
            )
            for s in result.sets
        ],
        p_values=result.p_values,
    )


def handle_ablate(request: schemas.AblateRequest) -> schemas.AblateResponse:
    config = _resolve_config(request)
    result = run_ablate(
        config,
        request.train_manifest,
        request.eval_manifest,
        request.out_dir,
        force=request.force,
        reduced=request.reduced,
    )
    return schemas.AblateResponse(
        out_dir=str(result.out_dir),
        report_path=str(result.report_path),
        variants=result.table,
        p_values=result.p_values,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="vascmae", version=__version__)

    def guard(handler, request):
        try:
            return handler(request)
        except PipelineError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.get("/config/default", response_model=ExperimentConfig)
    def config_default(seed: int = 0):
        return ExperimentConfig(seed=seed)

    @app.post("/synth", response_model=schemas.SynthResponse)
    def synth(request: schemas.SynthRequest):
        return guard(handle_synth, request)

    @app.post("/pretrain", response_model=schemas.TrainResponse)
    def pretrain(request: schemas.PretrainRequest):
        return guard(handle_pretrain, request)

    @app.post("/finetune", response_model=schemas.TrainResponse)
    def finetune(request: schemas.FinetuneRequest):
        return guard(handle_finetune, request)

    @app.post("/infer", response_model=schemas.InferResponse)
    def infer(request: schemas.InferRequest):
        return guard(handle_infer, request)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def evaluate(request: schemas.EvalRequest):
        return guard(handle_eval, request)

    @app.post("/ablate", response_model=schemas.AblateResponse)
    def ablate(request: schemas.AblateRequest):
        return guard(handle_ablate, request)

    return app
