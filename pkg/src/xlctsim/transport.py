"""Physics kernels: voxel ray traversal, X-ray fluence, optical diffusion weights.

Optical transport uses the continuous-wave diffusion approximation with the
infinite-medium Green's function; boundary effects are deliberately not
modeled. The X-ray beam is a single central ray with a Gaussian transverse
profile truncated at 3 sigma; attenuation is evaluated along the central ray
only. Both choices trade physical completeness for closed-form testability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .phantom import Grid, VoxelPhantom
from .scan import BeamPose, DetectorSet, Ray, beam_ray

#: FWHM = 2 sqrt(2 ln 2) sigma for a Gaussian profile.
FWHM_TO_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

#: Transverse support cutoff of the beam, in units of sigma.
BEAM_SUPPORT_SIGMAS = 3.0

_EPS = 1e-12


@dataclass(frozen=True)
class RayTraceResult:
    """Voxels crossed by a ray, with exact intersection lengths (mm)."""

    voxels: np.ndarray    # flat indices in traversal order
    lengths: np.ndarray   # same length, all > 0

    def __len__(self) -> int:
        return len(self.voxels)

    @property
    def total_length(self) -> float:
        return float(self.lengths.sum())


@dataclass(frozen=True)
class OpticalBackground:
    """Diffusion-approximation constants of the uniform background."""

    mu_a: float
    mu_s_prime: float
    D: float        # diffusion coefficient, mm
    mu_eff: float   # effective attenuation, 1/mm


@dataclass(frozen=True)
class FluenceDeposit:
    """Sparse X-ray fluence map: flat voxel indices (sorted) and values."""

    voxels: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.voxels)


def diffusion_params(mu_a: float, mu_s_prime: float) -> OpticalBackground:
    """D = 1 / (3 (mu_a + mu_s')), mu_eff = sqrt(3 mu_a (mu_a + mu_s'))."""
    if mu_a <= 0 or mu_s_prime <= 0:
        raise ValidationError(
            f"mu_a and mu_s_prime must be > 0, got ({mu_a}, {mu_s_prime})")
    mu_t = mu_a + mu_s_prime
    return OpticalBackground(mu_a=mu_a, mu_s_prime=mu_s_prime,
                             D=1.0 / (3.0 * mu_t),
                             mu_eff=math.sqrt(3.0 * mu_a * mu_t))


def _clip_to_box(origin: np.ndarray, direction: np.ndarray,
                 lo: np.ndarray, hi: np.ndarray) -> tuple[float, float] | None:
    """Slab-clip a ray against an axis-aligned box; None if it misses."""
    t0, t1 = -math.inf, math.inf
    for k in range(3):
        d = direction[k]
        if abs(d) < _EPS:
            if origin[k] < lo[k] or origin[k] > hi[k]:
                return None
            continue
        ta = (lo[k] - origin[k]) / d
        tb = (hi[k] - origin[k]) / d
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    if not (t1 > t0):
        return None
    return t0, t1


def _trace_segments(grid: Grid, ray: Ray):
    """Siddon traversal returning (flat voxels, lengths, t edges)."""
    o = np.asarray(ray.origin, dtype=float)
    d = np.asarray(ray.direction, dtype=float)
    norm = np.linalg.norm(d)
    if norm < _EPS:
        raise ValidationError("ray direction must be nonzero")
    d = d / norm
    lo = np.asarray(grid.origin, dtype=float)
    hi = lo + grid.extent
    clip = _clip_to_box(o, d, lo, hi)
    empty = (np.empty(0, dtype=np.int64), np.empty(0), np.empty(0))
    if clip is None:
        return empty
    t0, t1 = clip
    # All plane-crossing parameters per axis, merged and deduplicated.
    edges = [np.array([t0, t1])]
    for k in range(3):
        if abs(d[k]) < _EPS:
            continue
        planes = lo[k] + grid.voxel_size * np.arange(grid.dims[k] + 1)
        t = (planes - o[k]) / d[k]
        edges.append(t[(t > t0) & (t < t1)])
    t_edges = np.unique(np.concatenate(edges))
    lengths = np.diff(t_edges)
    mids = o[None, :] + 0.5 * (t_edges[:-1] + t_edges[1:])[:, None] * d[None, :]
    ijk = np.floor((mids - lo) / grid.voxel_size).astype(np.int64)
    np.clip(ijk, 0, np.asarray(grid.dims) - 1, out=ijk)
    flat = grid.flat_index(ijk[:, 0], ijk[:, 1], ijk[:, 2])
    keep = lengths > 0
    return flat[keep], lengths[keep], t_edges


def siddon_trace(grid: Grid, ray: Ray) -> RayTraceResult:
    """Exact voxel/length pairs of the ray-grid intersection (empty on a miss)."""
    voxels, lengths, _ = _trace_segments(grid, ray)
    return RayTraceResult(voxels=voxels, lengths=lengths)


def xray_line_integral(phantom: VoxelPhantom, ray: Ray) -> float:
    """Optical depth of the ray through the phantom: sum of mu_x * length.

    The transmitted fraction is exp(-result). Attenuation applies only inside
    the object support; grid voxels outside the mask count as air.
    """
    trace = siddon_trace(phantom.grid, ray)
    if len(trace) == 0:
        return 0.0
    mu = phantom.mu_x_flat()
    return float(np.dot(mu[trace.voxels], trace.lengths))


def beam_fluence(phantom: VoxelPhantom, pose: BeamPose, i0: float) -> FluenceDeposit:
    """Gaussian pencil-beam fluence deposited on voxel centers.

    Every voxel center within 3 sigma perpendicular distance of the beam line
    receives i0 * exp(-d_perp^2 / (2 sigma^2)) * exp(-A(t)), where A(t) is the
    attenuation line integral from grid entry to the center's axial coordinate
    along the central ray.
    """
    if i0 <= 0:
        raise ValidationError(f"i0 must be > 0, got {i0}")
    grid = phantom.grid
    h = grid.voxel_size
    sigma = pose.fwhm / FWHM_TO_SIGMA
    cutoff = BEAM_SUPPORT_SIGMAS * sigma
    ray = beam_ray(pose, standoff=grid.bounding_radius + 10.0)
    o = ray.origin
    d = ray.direction

    # Candidate voxels: march the line through the grid box inflated by the
    # transverse cutoff, then dilate in index space. The dilation radius
    # covers the worst-case offset between a sample point and a voxel center
    # at exactly the cutoff distance.
    lo = np.asarray(grid.origin, dtype=float)
    hi = lo + grid.extent
    pad = cutoff + h
    clip = _clip_to_box(o, d, lo - pad, hi + pad)
    empty = FluenceDeposit(voxels=np.empty(0, dtype=np.int64), values=np.empty(0))
    if clip is None:
        return empty
    t0, t1 = clip
    ts = np.arange(t0, t1 + 0.5 * h, 0.5 * h)
    pts = o[None, :] + ts[:, None] * d[None, :]
    ijk = np.floor((pts - lo) / h).astype(np.int64)
    np.clip(ijk, 0, np.asarray(grid.dims) - 1, out=ijk)
    seeds = np.unique(grid.flat_index(ijk[:, 0], ijk[:, 1], ijk[:, 2]))

    r_dil = int(math.ceil(cutoff / h)) + 2
    # offsets larger than the grid itself can never land on a valid voxel
    offs = [np.arange(-min(r_dil, grid.dims[k] - 1),
                      min(r_dil, grid.dims[k] - 1) + 1) for k in range(3)]
    ox, oy, oz = np.meshgrid(*offs, indexing="ij")
    offsets = np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=1)
    sx, sy, sz = grid.unflatten(seeds)
    cand = np.stack([sx, sy, sz], axis=1)[:, None, :] + offsets[None, :, :]
    cand = cand.reshape(-1, 3)
    valid = np.all((cand >= 0) & (cand < np.asarray(grid.dims)), axis=1)
    cand = cand[valid]
    flat = np.unique(grid.flat_index(cand[:, 0], cand[:, 1], cand[:, 2]))

    centers = grid.voxel_centers(flat)
    w = centers - o[None, :]
    t_proj = w @ d
    perp = w - t_proj[:, None] * d[None, :]
    d2 = np.einsum("ij,ij->i", perp, perp)
    keep = d2 <= cutoff * cutoff
    flat = flat[keep]
    if len(flat) == 0:
        return empty
    t_proj = t_proj[keep]
    d2 = d2[keep]

    # Cumulative attenuation along the central ray; clamped to [0, A_total]
    # outside the chord (np.interp holds the end values).
    voxels, lengths, t_edges = _trace_segments(grid, ray)
    if len(voxels) > 0:
        mu = phantom.mu_x_flat()
        a_edges = np.concatenate([[0.0], np.cumsum(mu[voxels] * lengths)])
        att = np.interp(t_proj, t_edges, a_edges)
    else:
        att = np.zeros_like(t_proj)

    values = i0 * np.exp(-d2 / (2.0 * sigma * sigma) - att)
    return FluenceDeposit(voxels=flat, values=values)


def greens_cw(r_src, r_det, optical: OpticalBackground, r_min: float = 1e-6) -> float:
    """CW infinite-medium diffusion Green's function, 1/mm^2.

    G = exp(-mu_eff r) / (4 pi D r) with r clamped below at r_min. Pass half
    the voxel space diagonal as r_min when evaluating on a voxel grid.
    """
    r = float(np.linalg.norm(np.asarray(r_src, dtype=float)
                             - np.asarray(r_det, dtype=float)))
    r = max(r, r_min)
    return math.exp(-optical.mu_eff * r) / (4.0 * math.pi * optical.D * r)


def greens_cw_many(points: np.ndarray, r_det, optical: OpticalBackground,
                   r_min: float) -> np.ndarray:
    """Vectorized :func:`greens_cw` from many points to one detector."""
    diff = np.asarray(points, dtype=float) - np.asarray(r_det, dtype=float)[None, :]
    r = np.maximum(np.linalg.norm(diff, axis=1), r_min)
    return np.exp(-optical.mu_eff * r) / (4.0 * math.pi * optical.D * r)


def detector_weight(voxel_center, detector: int, detectors: DetectorSet,
                    optical: OpticalBackground, r_min: float = 1e-6) -> float:
    """Optical coupling of one voxel into one detector."""
    if not 0 <= detector < len(detectors):
        raise IndexError(f"detector index {detector} out of range "
                         f"[0, {len(detectors)})")
    g = greens_cw(voxel_center, detectors.positions[detector], optical, r_min)
    return float(detectors.sensitivity[detector] * g)
