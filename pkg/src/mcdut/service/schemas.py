"""Request and response models for the HTTP API."""

from __future__ import annotations

from enum import Enum
from typing import Any, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str
    presets: list[str]


class JobStatus(str, Enum):
    queued = "queued"
    running = "running"
    finished = "finished"
    failed = "failed"


class TrainRequest(BaseModel):
    preset: Optional[str] = Field(None, description="bundled preset name, e.g. 'horse2zebra'")
    config: dict[str, Any] = Field(default_factory=dict, description="flat/nested overrides on top of the preset")
    data_root: str
    out_dir: Optional[str] = Field(None, description="defaults to <workdir>/<job id>")
    resume: Optional[str] = None


class TrainJob(BaseModel):
    job_id: str
    status: JobStatus
    out_dir: str
    step: int = 0
    last_metrics: Optional[dict[str, float]] = None
    error: Optional[str] = None


class TranslateRequest(BaseModel):
    checkpoint: str
    image_png_base64: str = Field(..., description="RGB image, any size; resized to the working resolution")
    size: Optional[int] = None


class TranslateResponse(BaseModel):
    image_png_base64: str
    width: int
    height: int


class EvaluateRequest(BaseModel):
    checkpoint: str
    data_root: str
    split: str = "test"
    extractor: str = "random-projection"


class MetricResponse(BaseModel):
    fid: float
    kid_x100: float
    n_gen: int
    n_real: int
    extractor_id: str
