"""Pydantic request/response models for the experiment service.

Training configs travel as plain mappings (already resolved by the client)
and are validated by the core config builders; path fields refer to the
server's filesystem.
"""
from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str
    deterministic: bool


class ErrorPayload(BaseModel):
    kind: str
    message: str


class ErrorResponse(BaseModel):
    error: ErrorPayload


class GenerateDatasetRequest(BaseModel):
    out_dir: str
    config: dict[str, Any] = Field(default_factory=dict)


class GenerateDatasetResponse(BaseModel):
    dataset_dir: str
    num_cases: int
    case_ids: list[str]


class SplitSpec(BaseModel):
    n_labeled: int
    m_unlabeled: int
    val_frac: float = 0.0
    test_frac: float = 0.0
    seed: int = 0


class MakeSplitRequest(BaseModel):
    dataset_dir: str
    split: SplitSpec
    out_path: Optional[str] = None


class MakeSplitResponse(BaseModel):
    manifest: dict[str, Any]
    out_path: Optional[str]


class TrainPriorRequest(BaseModel):
    dataset_dir: str
    split_path: Optional[str] = None
    split: Optional[SplitSpec] = None
    config: dict[str, Any] = Field(default_factory=dict)
    out_ckpt: str
    log_path: Optional[str] = None
    seed: int = 0


class TrainPriorResponse(BaseModel):
    checkpoint: str
    iterations: int
    final_loss: float


class TrainSslRequest(BaseModel):
    dataset_dir: str
    split_path: Optional[str] = None
    split: Optional[SplitSpec] = None
    strategy: str
    config: dict[str, Any] = Field(default_factory=dict)
    dae_ckpt: Optional[str] = None
    out_dir: str
    seed: int = 0


class TrainSslResponse(BaseModel):
    checkpoint: str
    log: str
    iterations: int
    selection: str
    best_val_dsc: Optional[float] = None


class ExperimentRequest(BaseModel):
    manifest: dict[str, Any]
    resume: bool = False


class ExperimentResponse(BaseModel):
    out_dir: str
    cells: list[dict[str, Any]]
    summary: list[dict[str, Any]]


class EvaluateRequest(BaseModel):
    checkpoint: str
    dataset_dir: str
    split_path: str
    subset: str = "test"
    patch_size: Optional[list[int]] = None
    out_json: Optional[str] = None


class EvaluateResponse(BaseModel):
    metrics: dict[str, Any]
    out_json: str


class InferenceRequest(BaseModel):
    checkpoint: str
    dataset_dir: str
    case_ids: Optional[list[str]] = None
    dae_ckpt: Optional[str] = None
    out_dir: str
    patch_size: Optional[list[int]] = None


class InferenceResponse(BaseModel):
    cases: list[dict[str, Any]]
    out_dir: str
    uncertainty: bool


class ReportRequest(BaseModel):
    results_dir: str
    out_dir: str
    infer_dir: Optional[str] = None


class ReportResponse(BaseModel):
    tables: list[str]
    figures: list[str]
