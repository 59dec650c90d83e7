"""Pydantic request/response models for the pipeline service."""

from __future__ import annotations

from pydantic import BaseModel, Field, model_validator

from ..pipeline import ExperimentConfig


class StageRequest(BaseModel):
    """Common request base: inline config or a config file, plus overrides."""

    config: ExperimentConfig | None = None
    config_path: str | None = None
    seed: int | None = None
    force: bool = False
    workers: int = 1

    @model_validator(mode="after")
    def _one_config_source(self):
        if self.config is not None and self.config_path is not None:
            raise ValueError("pass either an inline config or config_path, not both")
        return self


class SynthRequest(StageRequest):
    n_cases: int = Field(ge=1)
    out_dir: str


class SynthResponse(BaseModel):
    out_dir: str
    manifest_path: str
    n_cases: int


class PretrainRequest(StageRequest):
    manifest_path: str
    out_dir: str


class FinetuneRequest(StageRequest):
    manifest_path: str
    out_dir: str
    checkpoint_path: str | None = None
    from_scratch: bool = False

    @model_validator(mode="after")
    def _checkpoint_or_scratch(self):
        if (self.checkpoint_path is None) == (not self.from_scratch):
            raise ValueError("pass checkpoint_path, or set from_scratch=true")
        return self


class TrainResponse(BaseModel):
    out_dir: str
    checkpoint_path: str
    log_path: str
    final_loss: float
    steps: int


class InferRequest(StageRequest):
    manifest_path: str
    model_path: str
    out_dir: str


class InferResponse(BaseModel):
    out_dir: str
    predictions_path: str
    n_cases: int


class PredictionSet(BaseModel):
    label: str
    path: str


class EvalRequest(StageRequest):
    manifest_path: str
    predictions: list[PredictionSet] = Field(min_length=1)
    out_dir: str


class EvalSetMetrics(BaseModel):
    label: str
    se_at_fpr: float
    threshold: float | None
    p_se: float
    p_sp: float | None
    strata: dict[str, float | None]
    n_cases: int
    n_lesions: int


class EvalResponse(BaseModel):
    out_dir: str
    metrics_path: str
    svg_path: str
    sets: list[EvalSetMetrics]
    p_values: dict[str, float]


class AblateRequest(StageRequest):
    train_manifest: str
    eval_manifest: str
    out_dir: str
    reduced: bool = False


class AblateResponse(BaseModel):
    out_dir: str
    report_path: str
    variants: dict[str, dict]
    p_values: dict[str, float]


class HealthResponse(BaseModel):
    status: str
    version: str
