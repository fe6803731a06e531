"""Pipeline configuration: pydantic models, YAML loading, normalized dumps.

One YAML file drives one run. Unknown keys are rejected; every omitted key
is filled with its documented default and echoed back by the normalized
dump, so dump -> load is a fixed point.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Literal, Optional

import pydantic
import yaml
from pydantic import BaseModel, ConfigDict, Field

from . import recon
from .errors import ConfigError
from .forward import DEFAULT_COUNT_SCALE, SourceModel
from .phantom import TissueProperties, TargetSpec, VoxelPhantom, \
    add_capillary_target, add_uniform_background, build_cylinder_phantom
from .scan import DetectorSet, ScanProtocol, detector_ring, make_protocol


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class BackgroundConfig(_Strict):
    mu_a: float = Field(0.01, gt=0)
    mu_s_prime: float = Field(1.0, gt=0)
    mu_x: float = Field(0.02, ge=0)


class TargetConfig(_Strict):
    center: tuple[float, float, float]
    radius: float = Field(gt=0)
    height: float = Field(gt=0)
    concentration: float = Field(ge=0)


class PhantomConfig(_Strict):
    diameter: float = Field(gt=0)
    height: float = Field(gt=0)
    voxel_size: float = Field(gt=0)
    background: BackgroundConfig = BackgroundConfig()
    background_concentration: float = Field(0.0, ge=0)  # uniform uptake floor, uM
    targets: list[TargetConfig] = []


class ProtocolConfig(_Strict):
    n_angles: int = Field(6, ge=1)
    angles: Optional[list[float]] = None
    fov: float = Field(gt=0)
    stage_speed: float = Field(5.0, gt=0)
    bin_time: float = Field(0.02, gt=0)
    slices: list[float] = [0.0]
    beam_fwhm: float = Field(0.15, gt=0)
    quadrature_q: int = Field(5, ge=1)
    turnaround_time: float = Field(1.17, ge=0)


class DetectorConfig(_Strict):
    count: int = Field(4, ge=1)
    ring_radius: float = Field(gt=0)
    z: Optional[float] = None     # default: mean of the protocol slices


class SourceConfig(_Strict):
    i0: float = Field(1.0, gt=0)
    epsilon: float = Field(1.0, gt=0)
    count_scale: float = Field(DEFAULT_COUNT_SCALE, gt=0)
    ct_noise: Optional[float] = Field(None, ge=0)


class SolverConfig(_Strict):
    algorithm: Literal["mlem", "fista"] = "fista"
    max_iters: int = Field(200, ge=1)
    lam: Optional[float] = Field(None, ge=0, alias="lambda")
    lambda_fraction: float = Field(0.02, gt=0, lt=1)
    tolerance: float = Field(0.0, ge=0)
    lipschitz_iters: int = Field(30, ge=1)
    epsilon_floor: float = Field(1e-12, gt=0)
    fbp_filter: Literal["ramp", "ramp-hann"] = "ramp"


class PipelineConfig(_Strict):
    phantom: PhantomConfig
    protocol: ProtocolConfig
    detectors: DetectorConfig
    source: SourceConfig = SourceConfig()
    solver: SolverConfig = SolverConfig()
    output_dir: Optional[str] = None
    seed: int = Field(0, ge=0, lt=2 ** 64)
    threads: int = Field(1, ge=1)
    csv_export: bool = False


def _format_pydantic_error(exc: pydantic.ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(raw: object) -> PipelineConfig:
    """Validate an already-parsed mapping into a PipelineConfig."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    try:
        return PipelineConfig.model_validate(raw)
    except pydantic.ValidationError as exc:
        raise ConfigError(_format_pydantic_error(exc)) from exc


def load_config(path: Path) -> PipelineConfig:
    """Load and validate a YAML config file.

    Parse errors carry the line/column; validation errors name the field.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"cannot parse {path}{where}: {exc}") from exc
    return parse_config(raw)


def normalized_dump(cfg: PipelineConfig) -> str:
    """Canonical YAML text with every default filled in."""
    return yaml.safe_dump(cfg.model_dump(mode="json", by_alias=True),
                          sort_keys=False)


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(normalized_dump(cfg).encode()).hexdigest()


def protocol_hash(cfg: PipelineConfig) -> str:
    text = yaml.safe_dump(cfg.protocol.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


# Builders turning config sections into core objects.

def phantom_from_config(cfg: PhantomConfig) -> VoxelPhantom:
    bg = TissueProperties(mu_a=cfg.background.mu_a,
                          mu_s_prime=cfg.background.mu_s_prime,
                          mu_x=cfg.background.mu_x)
    phantom = build_cylinder_phantom(cfg.diameter, cfg.height, cfg.voxel_size, bg)
    if cfg.background_concentration > 0:
        phantom = add_uniform_background(phantom, cfg.background_concentration)
    for t in cfg.targets:
        phantom = add_capillary_target(
            phantom, TargetSpec(center=t.center, radius=t.radius,
                                height=t.height, concentration=t.concentration))
    return phantom


def protocol_from_config(cfg: ProtocolConfig) -> ScanProtocol:
    return make_protocol(fov=cfg.fov, n_angles=cfg.n_angles, angles=cfg.angles,
                         stage_speed=cfg.stage_speed, bin_time=cfg.bin_time,
                         slices=cfg.slices, beam_fwhm=cfg.beam_fwhm,
                         quadrature_q=cfg.quadrature_q,
                         turnaround_time=cfg.turnaround_time)


def detectors_from_config(cfg: DetectorConfig, protocol: ScanProtocol) -> DetectorSet:
    z = cfg.z if cfg.z is not None else float(sum(protocol.slices) / len(protocol.slices))
    return detector_ring(cfg.count, cfg.ring_radius, z)


def source_from_config(cfg: SourceConfig) -> SourceModel:
    return SourceModel(i0=cfg.i0, epsilon=cfg.epsilon, count_scale=cfg.count_scale)


def solver_from_config(cfg: SolverConfig) -> recon.SolverConfig:
    return recon.SolverConfig(max_iters=cfg.max_iters,
                              lam=cfg.lam if cfg.lam is not None else 0.0,
                              tolerance=cfg.tolerance,
                              lipschitz_iters=cfg.lipschitz_iters,
                              epsilon_floor=cfg.epsilon_floor)
