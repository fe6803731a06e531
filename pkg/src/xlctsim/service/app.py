"""FastAPI service wrapping the scanner pipeline.

Each /run/* endpoint executes one pipeline stage server-side, writing
artifacts into the requested output directory (which lives on the server's
filesystem) and returning their digests. Domain errors map to structured
JSON bodies: {"detail": {"kind": ..., "message": ...}} where kind is one of
validation / capacity / degeneracy / error.
"""

from __future__ import annotations

import time
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..config import config_hash, normalized_dump
from ..errors import CapacityError, DegeneracyError, ValidationError, XlctError
from ..fileio import sha256_file
from .models import (ArtifactOut, HealthResponse, NormalizeRequest,
                     NormalizeResponse, PipelineResponse, StageRequest,
                     StageResponse, SweepRequest, SweepResponse)


def error_kind(exc: XlctError) -> str:
    if isinstance(exc, ValidationError):
        return "validation"
    if isinstance(exc, CapacityError):
        return "capacity"
    if isinstance(exc, DegeneracyError):
        return "degeneracy"
    return "error"


_STATUS = {"validation": 400, "capacity": 413, "degeneracy": 422, "error": 500}


def _prepare(req: StageRequest):
    cfg = pipeline.effective_config(req.config, seed=req.seed, threads=req.threads)
    out = pipeline.resolve_out_dir(cfg, req.out_dir)
    return cfg, out

def _artifacts(out: Path, paths) -> list[ArtifactOut]:
    return [ArtifactOut(path=str(p.relative_to(out)), sha256=sha256_file(p),
                        bytes=p.stat().st_size) for p in paths]


def _stage_response(stage: str, out: Path, started: float, paths,
                    summary: dict | None = None) -> StageResponse:
    clean = {k: str(v) for k, v in (summary or {}).items()}
    return StageResponse(stage=stage, out_dir=str(out),
                         elapsed_s=time.perf_counter() - started,
                         artifacts=_artifacts(out, paths), summary=clean)


def create_app() -> FastAPI:
    app = FastAPI(title="xlctsim", version=__version__,
                  description="Virtual focused-beam XLCT scanner")

    @app.exception_handler(XlctError)
    async def xlct_error_handler(request: Request, exc: XlctError):
        kind = error_kind(exc)
        return JSONResponse(status_code=_STATUS[kind],
                            content={"detail": {"kind": kind,
                                                "message": str(exc)}})

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/config/normalize", response_model=NormalizeResponse)
    def normalize(req: NormalizeRequest):
        return NormalizeResponse(
            config=req.config.model_dump(mode="json", by_alias=True),
            yaml_text=normalized_dump(req.config),
            config_sha256=config_hash(req.config))

    @app.post("/run/phantom", response_model=StageResponse)
    def run_phantom(req: StageRequest):
        started = time.perf_counter()
        cfg, out = _prepare(req)
        phantom, paths = pipeline.stage_phantom(cfg, out)
        summary = {"dims": "x".join(str(d) for d in phantom.dims),
                   "voxels_inside": int(phantom.inside_mask.sum())}
        return _stage_response("phantom", out, started, paths, summary)

    @app.post("/run/simulate", response_model=StageResponse)
    def run_simulate(req: StageRequest):
        started = time.perf_counter()
        cfg, out = _prepare(req)
        pipeline.stage_phantom(cfg, out)
        ms, _, paths = pipeline.stage_simulate(cfg, out)
        summary = {"counts_total": int(ms.counts.sum()),
                   "n_bins": ms.n_bins, "n_detectors": ms.n_detectors}
        return _stage_response("simulate", out, started, paths, summary)

    @app.post("/run/recon-xlct", response_model=StageResponse)
    def run_recon_xlct(req: StageRequest):
        started = time.perf_counter()
        cfg, out = _prepare(req)
        volume, paths = pipeline.stage_recon_xlct(cfg, out)
        summary = {"algorithm": cfg.solver.algorithm,
                   "iterations": volume.iterations_run,
                   "max_uM": float(volume.values.max())}
        return _stage_response("recon-xlct", out, started, paths, summary)

    @app.post("/run/recon-ct", response_model=StageResponse)
    def run_recon_ct(req: StageRequest):
        started = time.perf_counter()
        cfg, out = _prepare(req)
        volume, paths = pipeline.stage_recon_ct(cfg, out)
        summary = {"filter": cfg.solver.fbp_filter,
                   "max_per_mm": float(volume.values.max())}
        return _stage_response("recon-ct", out, started, paths, summary)

    @app.post("/run/metrics", response_model=StageResponse)
    def run_metrics(req: StageRequest):
        started = time.perf_counter()
        cfg, out = _prepare(req)
        values, paths = pipeline.stage_metrics(cfg, out)
        return _stage_response("metrics", out, started, paths, values)

    @app.post("/run/pipeline", response_model=PipelineResponse)
    def run_pipeline(req: StageRequest):
        cfg = pipeline.effective_config(req.config, seed=req.seed,
                                        threads=req.threads)
        out = pipeline.resolve_out_dir(cfg, req.out_dir)
        manifest = pipeline.run_pipeline(cfg, out)
        return PipelineResponse(out_dir=str(out), manifest=manifest.to_dict())

    @app.post("/run/sweep", response_model=SweepResponse)
    def run_sweep(req: SweepRequest):
        cfg = pipeline.effective_config(req.config, seed=req.seed,
                                        threads=req.threads)
        out = pipeline.resolve_out_dir(cfg, req.out_dir)
        result = pipeline.run_sweep(cfg, out, req.concentrations,
                                    cnr_threshold=req.cnr_threshold)
        return SweepResponse(
            out_dir=str(out), rows=result["rows"],
            cnr_threshold=result["cnr_threshold"],
            first_concentration_below_threshold=str(
                result["first_concentration_below_threshold"]))

    return app


app = create_app()
