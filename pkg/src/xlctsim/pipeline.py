"""Config-driven pipeline: phantom -> simulate -> reconstruct -> metrics.

Every stage is callable on its own (the CLI and service expose them
individually) and reads its inputs from the output directory written by the
previous stage; ``run_pipeline`` chains them in-process and shares the
assembled system matrix between simulation and reconstruction. Outputs are
a pure function of (config, seed): thread count never changes any byte.
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.ndimage import binary_dilation

from . import __version__
from .config import (PipelineConfig, config_hash, detectors_from_config,
                     phantom_from_config, protocol_from_config, protocol_hash,
                     solver_from_config, source_from_config)
from .errors import ConfigError, XlctError
from .fileio import (export_measurements_csv, read_measurements, read_phantom,
                     read_volume, sha256_file, write_csv, write_key_values,
                     write_measurements, write_phantom, write_volume)
from .forward import (SystemMatrix, assemble_system_matrix, synthesize_ct,
                      synthesize_xlct)
from .metrics import (LineProfile, cnr, dice, estimate_scan_time,
                      line_profile_fwhm)
from .phantom import Grid, VoxelPhantom
from .recon import (ReconVolume, SolverConfig, fbp_parallel, fista_l1,
                    l1_weight_heuristic, mlem)
from .scan import enumerate_fly_bins

PHANTOM_BASE = "phantom"
MEASUREMENTS_BASE = "measurements"
RECON_XLCT_BASE = "recon_xlct"
RECON_CT_BASE = "recon_ct"
METRICS_FILE = "metrics.txt"
MANIFEST_FILE = "manifest.yaml"

#: CNR considered "detectable" in the sensitivity sweep.
DEFAULT_CNR_THRESHOLD = 4.0


@dataclass(frozen=True)
class ArtifactRecord:
    path: str       # relative to the output directory
    sha256: str
    bytes: int


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    seed: int
    threads: int
    stages: list[tuple[str, float]] = field(default_factory=list)
    artifacts: list[ArtifactRecord] = field(default_factory=list)
    status: str = "ok"
    failed_stage: str | None = None

    def to_dict(self) -> dict:
        doc = {
            "tool": "xlctsim",
            "version": self.tool_version,
            "status": self.status,
            "config_sha256": self.config_hash,
            "seed": self.seed,
            "threads": self.threads,
            "stages": [{"name": n, "seconds": s} for n, s in self.stages],
            "artifacts": [{"path": a.path, "sha256": a.sha256, "bytes": a.bytes}
                          for a in self.artifacts],
        }
        if self.failed_stage is not None:
            doc["failed_stage"] = self.failed_stage
        return doc

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / MANIFEST_FILE
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def _records(out_dir: Path, paths: list[Path]) -> list[ArtifactRecord]:
    recs = []
    for p in paths:
        recs.append(ArtifactRecord(path=str(p.relative_to(out_dir)),
                                   sha256=sha256_file(p),
                                   bytes=p.stat().st_size))
    return recs


def resolve_out_dir(cfg: PipelineConfig, out_dir: str | Path | None) -> Path:
    chosen = out_dir if out_dir is not None else cfg.output_dir
    if chosen is None:
        raise ConfigError("no output directory: set output_dir or pass --out")
    path = Path(chosen)
    path.mkdir(parents=True, exist_ok=True)
    return path


def effective_config(cfg: PipelineConfig, seed: int | None = None,
                     threads: int | None = None) -> PipelineConfig:
    """Apply CLI/request overrides; the result is what gets hashed."""
    update = {}
    if seed is not None:
        update["seed"] = seed
    if threads is not None:
        update["threads"] = threads
    return cfg.model_copy(update=update) if update else cfg


def _scaled_matrix(A: SystemMatrix, count_scale: float) -> SystemMatrix:
    return SystemMatrix(A.matrix * count_scale, A.grid, A.n_detectors, A.bins)


# ---------------------------------------------------------------------------
# stages

def stage_phantom(cfg: PipelineConfig, out_dir: Path) -> tuple[VoxelPhantom, list[Path]]:
    phantom = phantom_from_config(cfg.phantom)
    paths = write_phantom(phantom, out_dir / PHANTOM_BASE)
    return phantom, paths


def stage_simulate(cfg: PipelineConfig, out_dir: Path,
                   phantom: VoxelPhantom | None = None,
                   matrix: SystemMatrix | None = None) -> tuple:
    """Synthesize XLCT counts and the CT sinogram; returns (ms, matrix, paths)."""
    if phantom is None:
        phantom = phantom_from_config(cfg.phantom)
    protocol = protocol_from_config(cfg.protocol)
    detectors = detectors_from_config(cfg.detectors, protocol)
    source = source_from_config(cfg.source)
    if matrix is None:
        matrix = assemble_system_matrix(phantom, protocol, detectors, source,
                                        threads=cfg.threads)
    ms = synthesize_xlct(phantom, protocol, detectors, source, cfg.seed,
                         matrix=matrix)
    ms = ms.with_ct(synthesize_ct(phantom, protocol, cfg.seed,
                                  noise=cfg.source.ct_noise))
    paths = write_measurements(ms, out_dir / MEASUREMENTS_BASE,
                               count_scale=cfg.source.count_scale,
                               protocol_hash=protocol_hash(cfg))
    if cfg.csv_export:
        paths += export_measurements_csv(ms, enumerate_fly_bins(protocol),
                                         out_dir / MEASUREMENTS_BASE)
    return ms, matrix, paths


def stage_recon_xlct(cfg: PipelineConfig, out_dir: Path,
                     matrix: SystemMatrix | None = None,
                     counts: np.ndarray | None = None) -> tuple[ReconVolume, list[Path]]:
    """Reconstruct concentration from counts with the configured solver.

    The matrix is scaled by count_scale so the estimate comes out in uM.
    """
    if counts is None:
        ms, _ = read_measurements(out_dir / MEASUREMENTS_BASE)
        counts = ms.counts
    if matrix is None:
        phantom = phantom_from_config(cfg.phantom)
        protocol = protocol_from_config(cfg.protocol)
        detectors = detectors_from_config(cfg.detectors, protocol)
        source = source_from_config(cfg.source)
        matrix = assemble_system_matrix(phantom, protocol, detectors, source,
                                        threads=cfg.threads)
    scaled = _scaled_matrix(matrix, cfg.source.count_scale)
    y = np.asarray(counts, dtype=float)
    solver = solver_from_config(cfg.solver)
    if cfg.solver.algorithm == "mlem":
        volume = mlem(scaled, y, solver)
    else:
        if cfg.solver.lam is None:
            solver = SolverConfig(max_iters=solver.max_iters,
                                  lam=l1_weight_heuristic(
                                      scaled, y, cfg.solver.lambda_fraction),
                                  tolerance=solver.tolerance,
                                  lipschitz_iters=solver.lipschitz_iters,
                                  epsilon_floor=solver.epsilon_floor)
        volume = fista_l1(scaled, y, solver)
    paths = write_volume(volume.values, volume.grid, out_dir / RECON_XLCT_BASE,
                         extras={"quantity": "concentration_uM",
                                 "algorithm": cfg.solver.algorithm,
                                 "iterations": volume.iterations_run})
    return volume, paths


def stage_recon_ct(cfg: PipelineConfig, out_dir: Path,
                   ct: np.ndarray | None = None) -> tuple[ReconVolume, list[Path]]:
    """Per-slice parallel-beam FBP of the CT sinogram, stacked over slices."""
    if ct is None:
        ms, _ = read_measurements(out_dir / MEASUREMENTS_BASE)
        ct = ms.ct_projections
    protocol = protocol_from_config(cfg.protocol)
    phantom_grid = phantom_from_config(cfg.phantom).grid
    n_slices = len(protocol.slices)
    n_angles = protocol.n_angles
    n_lat = protocol.bins_per_line
    sino = np.asarray(ct, dtype=float).reshape(n_slices, n_angles, n_lat)
    bins = enumerate_fly_bins(protocol)
    s_centers = np.array([b.center for b in bins[:n_lat]])
    angles = np.asarray(protocol.angles)

    nx, ny, _ = phantom_grid.dims
    h = phantom_grid.voxel_size
    values = np.empty((nx, ny, n_slices))
    for k, z in enumerate(protocol.slices):
        slice_grid = Grid((nx, ny, 1), h,
                          (phantom_grid.origin[0], phantom_grid.origin[1],
                           z - h / 2))
        rec = fbp_parallel(sino[k], angles, s_centers, slice_grid,
                           filter_name=cfg.solver.fbp_filter)
        values[:, :, k] = rec.values[:, :, 0]
    stack_grid = Grid((nx, ny, n_slices), h,
                      (phantom_grid.origin[0], phantom_grid.origin[1],
                       protocol.slices[0] - h / 2))
    volume = ReconVolume(grid=stack_grid, values=values)
    paths = write_volume(values, stack_grid, out_dir / RECON_CT_BASE,
                         extras={"quantity": "mu_x_per_mm",
                                 "slice_z": ",".join(repr(z) for z in protocol.slices),
                                 "filter": cfg.solver.fbp_filter})
    return volume, paths


def _nan_safe(fn, *args):
    try:
        return float(fn(*args))
    except XlctError:
        return float("nan")


def stage_metrics(cfg: PipelineConfig, out_dir: Path) -> tuple[dict, list[Path]]:
    """Quality metrics of both reconstructions against the stored truth."""
    phantom = read_phantom(out_dir / PHANTOM_BASE)
    xlct_values, xlct_grid, _ = read_volume(out_dir / RECON_XLCT_BASE)
    ct_values, ct_grid, _ = read_volume(out_dir / RECON_CT_BASE)
    protocol = protocol_from_config(cfg.protocol)
    ms, _ = read_measurements(out_dir / MEASUREMENTS_BASE)

    out: dict[str, object] = {}
    timing = estimate_scan_time(protocol)
    out["scan_time_per_slice_s"] = timing.per_slice
    out["scan_time_total_s"] = timing.total
    out["counts_total"] = int(ms.counts.sum())
    out["counts_max"] = int(ms.counts.max()) if len(ms.counts) else 0
    out["xlct_max_uM"] = float(xlct_values.max())

    # targets are voxels strictly above the uniform uptake floor
    target_mask = phantom.concentration > cfg.phantom.background_concentration
    if target_mask.any():
        background = phantom.inside_mask & ~binary_dilation(target_mask,
                                                            iterations=3)
        out["xlct_cnr"] = _nan_safe(cnr, xlct_values, target_mask, background)
        out["xlct_dice"] = _nan_safe(dice, xlct_values, target_mask, 0.5)
        if cfg.phantom.targets:
            t0 = cfg.phantom.targets[0]
            half = max(8 * t0.radius, 10 * cfg.phantom.voxel_size)
            profile = LineProfile(
                start=(t0.center[0] - half, t0.center[1], t0.center[2]),
                end=(t0.center[0] + half, t0.center[1], t0.center[2]),
                n_samples=max(33, int(2 * half / (cfg.phantom.voxel_size / 4))))
            vol = ReconVolume(grid=xlct_grid, values=xlct_values)
            out["xlct_fwhm_x_mm"] = _nan_safe(line_profile_fwhm, vol, profile)

    # CT fidelity inside the object, a 2-voxel rim excluded.
    h = ct_grid.voxel_size
    r_interior = phantom.support_radius() - 2 * h
    cx = ct_grid.axis_centers(0)
    cy = ct_grid.axis_centers(1)
    interior = (cx[:, None] ** 2 + cy[None, :] ** 2) <= r_interior ** 2
    if interior.any():
        vals = ct_values[interior, :]
        mu_true = phantom.background.mu_x
        out["ct_interior_mean_per_mm"] = float(vals.mean())
        out["ct_truth_mu_x_per_mm"] = mu_true
        if mu_true > 0:
            out["ct_interior_rmse_rel"] = float(
                np.sqrt(np.mean((vals - mu_true) ** 2)) / mu_true)

    path = write_key_values(out_dir / METRICS_FILE, out)
    return out, [path]


@contextmanager
def _timed(name: str, manifest: RunManifest):
    start = time.perf_counter()
    try:
        yield
    except XlctError as exc:
        manifest.status = "failed"
        manifest.failed_stage = name
        raise type(exc)(f"[stage {name}] {exc}") from exc
    except Exception:
        manifest.status = "failed"
        manifest.failed_stage = name
        raise
    finally:
        manifest.stages.append((name, time.perf_counter() - start))


def run_pipeline(cfg: PipelineConfig, out_dir: str | Path | None = None,
                 seed: int | None = None, threads: int | None = None) -> RunManifest:
    """Execute phantom -> simulate -> recon (XLCT + CT) -> metrics.

    Writes all artifacts plus a manifest with content digests. Identical
    (config, seed) produce byte-identical volumes for any thread count.
    """
    cfg = effective_config(cfg, seed=seed, threads=threads)
    out = resolve_out_dir(cfg, out_dir)
    manifest = RunManifest(config_hash=config_hash(cfg),
                           tool_version=__version__,
                           seed=cfg.seed, threads=cfg.threads)
    try:
        with _timed("phantom", manifest):
            phantom, paths = stage_phantom(cfg, out)
            manifest.artifacts += _records(out, paths)
        with _timed("simulate", manifest):
            _, matrix, paths = stage_simulate(cfg, out, phantom=phantom)
            manifest.artifacts += _records(out, paths)
        # reconstruction stages read the persisted (f32 round-tripped)
        # measurements so a chained run is byte-identical to staged runs
        with _timed("recon-xlct", manifest):
            _, paths = stage_recon_xlct(cfg, out, matrix=matrix)
            manifest.artifacts += _records(out, paths)
        with _timed("recon-ct", manifest):
            _, paths = stage_recon_ct(cfg, out)
            manifest.artifacts += _records(out, paths)
        with _timed("metrics", manifest):
            _, paths = stage_metrics(cfg, out)
            manifest.artifacts += _records(out, paths)
    finally:
        manifest.write(out)
    return manifest


def read_metrics(out_dir: Path) -> dict[str, str]:
    out = {}
    for line in (Path(out_dir) / METRICS_FILE).read_text().splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def run_sweep(cfg: PipelineConfig, out_dir: str | Path | None = None,
              concentrations: list[float] | None = None,
              seed: int | None = None, threads: int | None = None,
              cnr_threshold: float = DEFAULT_CNR_THRESHOLD) -> dict:
    """Concentration sensitivity sweep at fixed count_scale.

    Runs the full pipeline once per concentration (every target set to the
    swept value), collects the reconstructed CNR, and reports the first
    concentration, scanning downward, whose CNR drops below the threshold.
    """
    if not concentrations:
        raise ConfigError("sweep needs at least one concentration")
    if not cfg.phantom.targets:
        raise ConfigError("sweep needs a phantom with at least one target")
    cfg = effective_config(cfg, seed=seed, threads=threads)
    out = resolve_out_dir(cfg, out_dir)
    ordered = sorted(set(float(c) for c in concentrations), reverse=True)
    rows = []
    first_below = None
    for c in ordered:
        targets = [t.model_copy(update={"concentration": c})
                   for t in cfg.phantom.targets]
        sub = cfg.model_copy(update={
            "phantom": cfg.phantom.model_copy(update={"targets": targets})})
        sub_dir = out / f"sweep_{c:g}"
        run_pipeline(sub, sub_dir)
        got = read_metrics(sub_dir)
        value = float(got.get("xlct_cnr", "nan"))
        rows.append([c, value])
        if first_below is None and not (value >= cnr_threshold):
            first_below = c
    write_csv(out / "sweep.csv", ["concentration_uM", "cnr"], rows)
    summary = {
        "cnr_threshold": cnr_threshold,
        "first_concentration_below_threshold":
            first_below if first_below is not None else "none",
    }
    write_key_values(out / "sweep.txt", summary)
    return {"rows": rows, **summary}
