"""Request/response schemas of the scanner service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field

from ..config import PipelineConfig


class StageRequest(BaseModel):
    """One stage run: inline config + server-side output directory."""

    config: PipelineConfig
    out_dir: Optional[str] = None      # falls back to config.output_dir
    seed: Optional[int] = Field(None, ge=0, lt=2 ** 64)
    threads: Optional[int] = Field(None, ge=1)


class SweepRequest(StageRequest):
    concentrations: list[float]
    cnr_threshold: float = 4.0


class NormalizeRequest(BaseModel):
    config: PipelineConfig


class ArtifactOut(BaseModel):
    path: str
    sha256: str
    bytes: int


class StageResponse(BaseModel):
    stage: str
    out_dir: str
    elapsed_s: float
    artifacts: list[ArtifactOut]
    summary: dict[str, str] = {}


class PipelineResponse(BaseModel):
    out_dir: str
    manifest: dict


class SweepResponse(BaseModel):
    out_dir: str
    rows: list[tuple[float, float]]
    cnr_threshold: float
    first_concentration_below_threshold: str


class NormalizeResponse(BaseModel):
    config: dict
    yaml_text: str
    config_sha256: str


class HealthResponse(BaseModel):
    status: str
    version: str
