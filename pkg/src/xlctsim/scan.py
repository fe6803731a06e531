"""Rotary-gantry fly-scan geometry: protocols, bins, beam rays, detectors.

Lateral offset convention: a beam at angle theta travels along
d = (cos theta, sin theta, 0) and is displaced s mm along the in-plane
normal u = (-sin theta, cos theta, 0). This is used everywhere a lateral
coordinate appears (fly bins, sinogram bins, backprojection).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

DEFAULT_BEAM_FWHM = 0.15     # mm, matches the target in-plane resolution scale
DEFAULT_QUADRATURE_Q = 5
DEFAULT_STANDOFF = 1000.0    # mm, beam origin distance when no grid is known

_TRUNCATION_TOL = 1e-9


@dataclass(frozen=True)
class ScanProtocol:
    """Validated fly-scan protocol; construct via :func:`make_protocol`."""

    n_angles: int
    angles: tuple[float, ...]
    fov: float
    stage_speed: float
    bin_time: float
    step_size: float
    slices: tuple[float, ...]
    beam_fwhm: float
    quadrature_q: int
    turnaround_time: float

    @property
    def bins_per_line(self) -> int:
        return int(math.ceil(self.fov / self.step_size - _TRUNCATION_TOL))

    @property
    def n_bins(self) -> int:
        return len(self.slices) * self.n_angles * self.bins_per_line


@dataclass(frozen=True)
class BeamPose:
    """One beam position: angle, lateral offset, slice height, beam width."""

    theta: float
    s: float
    z: float
    fwhm: float

    def __post_init__(self):
        if self.fwhm <= 0:
            raise ValidationError(f"beam fwhm must be > 0, got {self.fwhm}")


@dataclass(frozen=True)
class FlyBin:
    """One gated counting window of the continuous lateral sweep."""

    index: tuple[int, int, int]     # (slice, angle, bin)
    s_start: float
    s_end: float
    z: float
    theta: float

    @property
    def center(self) -> float:
        return 0.5 * (self.s_start + self.s_end)


@dataclass(frozen=True)
class Ray:
    """origin + t * direction, direction is unit length."""

    origin: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class DetectorSet:
    positions: np.ndarray       # (n, 3) points on/near the object surface, mm
    sensitivity: np.ndarray     # (n,) dimensionless gains

    def __post_init__(self):
        object.__setattr__(self, "positions",
                           np.ascontiguousarray(self.positions, dtype=float))
        object.__setattr__(self, "sensitivity",
                           np.ascontiguousarray(self.sensitivity, dtype=float))
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValidationError("detector positions must have shape (n, 3)")
        if len(self.positions) < 1:
            raise ValidationError("at least one detector is required")
        if self.sensitivity.shape != (len(self.positions),):
            raise ValidationError("sensitivity must have one entry per detector")
        if np.any(self.sensitivity <= 0):
            raise ValidationError("detector sensitivities must be > 0")
        self.positions.flags.writeable = False
        self.sensitivity.flags.writeable = False

    def __len__(self) -> int:
        return len(self.positions)


def make_protocol(*, fov: float, n_angles: int = 6, angles=None,
                  stage_speed: float = 5.0, bin_time: float = 0.02,
                  slices=(0.0,), beam_fwhm: float = DEFAULT_BEAM_FWHM,
                  quadrature_q: int = DEFAULT_QUADRATURE_Q,
                  turnaround_time: float = 1.17) -> ScanProtocol:
    """Validate raw values into a ScanProtocol.

    When ``angles`` is not given they are spaced uniformly over [0, pi);
    step_size is always stage_speed * bin_time.
    """
    if n_angles < 1:
        raise ValidationError(f"n_angles must be >= 1, got {n_angles}")
    if stage_speed <= 0:
        raise ValidationError(f"stage_speed must be > 0, got {stage_speed}")
    if bin_time <= 0:
        raise ValidationError(f"bin_time must be > 0, got {bin_time}")
    if fov <= 0:
        raise ValidationError(f"fov must be > 0, got {fov}")
    if beam_fwhm <= 0:
        raise ValidationError(f"beam_fwhm must be > 0, got {beam_fwhm}")
    if quadrature_q < 1:
        raise ValidationError(f"quadrature_q must be >= 1, got {quadrature_q}")
    if turnaround_time < 0:
        raise ValidationError(f"turnaround_time must be >= 0, got {turnaround_time}")
    if len(slices) < 1:
        raise ValidationError("at least one slice z position is required")
    step_size = stage_speed * bin_time
    if step_size > fov + _TRUNCATION_TOL:
        raise ValidationError(
            f"step_size {step_size} exceeds fov {fov}")
    if angles is None:
        angles = tuple(k * math.pi / n_angles for k in range(n_angles))
    else:
        angles = tuple(float(a) for a in angles)
        if len(angles) != n_angles:
            raise ValidationError(
                f"angles has {len(angles)} entries but n_angles is {n_angles}")
    return ScanProtocol(n_angles=n_angles, angles=angles, fov=float(fov),
                        stage_speed=float(stage_speed), bin_time=float(bin_time),
                        step_size=float(step_size),
                        slices=tuple(float(z) for z in slices),
                        beam_fwhm=float(beam_fwhm), quadrature_q=int(quadrature_q),
                        turnaround_time=float(turnaround_time))


def enumerate_fly_bins(protocol: ScanProtocol) -> list[FlyBin]:
    """All gate windows, slice-major then angle then lateral.

    For every (slice, angle) the bins tile [-fov/2, fov/2) exactly; the last
    bin of a line is truncated when fov is not a multiple of step_size.
    """
    half = protocol.fov / 2
    n = protocol.bins_per_line
    bins: list[FlyBin] = []
    for si, z in enumerate(protocol.slices):
        for ai, theta in enumerate(protocol.angles):
            for k in range(n):
                s0 = -half + k * protocol.step_size
                s1 = half if k == n - 1 else -half + (k + 1) * protocol.step_size
                bins.append(FlyBin(index=(si, ai, k), s_start=s0, s_end=s1,
                                   z=z, theta=theta))
    return bins


def beam_ray(pose: BeamPose, standoff: float = DEFAULT_STANDOFF) -> Ray:
    """Pencil-beam ray for a pose; origin placed ``standoff`` mm upstream.

    Pass a standoff larger than the grid bounding radius so the origin is
    outside the grid (attenuation is accumulated from grid entry).
    """
    ct, st = math.cos(pose.theta), math.sin(pose.theta)
    direction = np.array([ct, st, 0.0])
    normal = np.array([-st, ct, 0.0])
    origin = pose.s * normal - standoff * direction + np.array([0.0, 0.0, pose.z])
    return Ray(origin=origin, direction=direction)


def quadrature_poses(bin: FlyBin, q: int, fwhm: float = DEFAULT_BEAM_FWHM) -> list[BeamPose]:
    """Midpoint-rule poses approximating the continuous sweep over the bin."""
    if q < 1:
        raise ValidationError(f"quadrature q must be >= 1, got {q}")
    width = bin.s_end - bin.s_start
    return [BeamPose(theta=bin.theta,
                     s=bin.s_start + (k + 0.5) * width / q,
                     z=bin.z, fwhm=fwhm)
            for k in range(q)]


def detector_ring(n: int, ring_radius: float, z: float) -> DetectorSet:
    """n unit-sensitivity point detectors uniformly spaced on a circle at height z."""
    if n < 1:
        raise ValidationError(f"detector count must be >= 1, got {n}")
    if ring_radius <= 0:
        raise ValidationError(f"ring_radius must be > 0, got {ring_radius}")
    phi = 2 * np.pi * np.arange(n) / n
    positions = np.stack([ring_radius * np.cos(phi),
                          ring_radius * np.sin(phi),
                          np.full(n, float(z))], axis=1)
    return DetectorSet(positions=positions, sensitivity=np.ones(n))
