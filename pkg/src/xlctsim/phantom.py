"""Voxelized numerical phantoms: cylindrical background plus capillary-tube targets.

Conventions used throughout the package:
  * world coordinates in mm, rotation axis = z axis through (0, 0);
  * isotropic voxels, grid corner at ``origin``, voxel center of (ix, iy, iz)
    at ``origin + (i + 0.5) * voxel_size``;
  * flat voxel index is x-fastest: ``n = ix + nx * (iy + ny * iz)``;
  * membership tests use voxel centers (no partial-volume weighting);
  * nearest-voxel lookup uses the floor((p - origin) / voxel_size) convention,
    so a point exactly on a voxel boundary belongs to the upper voxel.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, GeometryError, ValidationError

# Hard cap on voxels per axis; larger grids raise CapacityError.
MAX_DIM = 1024

_CONTAINMENT_TOL = 1e-9


@dataclass(frozen=True)
class TissueProperties:
    """Uniform background tissue properties (all in 1/mm)."""

    mu_a: float
    mu_s_prime: float
    mu_x: float

    def __post_init__(self):
        if self.mu_a <= 0:
            raise ValidationError(f"mu_a must be > 0, got {self.mu_a}")
        if self.mu_s_prime <= 0:
            raise ValidationError(f"mu_s_prime must be > 0, got {self.mu_s_prime}")
        if self.mu_x < 0:
            raise ValidationError(f"mu_x must be >= 0, got {self.mu_x}")
        if self.mu_s_prime < 10.0 * self.mu_a:
            warnings.warn(
                "mu_s_prime < 10 * mu_a: diffusion approximation may be invalid",
                stacklevel=2,
            )


#: Soft-tissue-mimicking defaults used when no background is given.
SOFT_TISSUE = TissueProperties(mu_a=0.01, mu_s_prime=1.0, mu_x=0.02)


@dataclass(frozen=True)
class Grid:
    """Regular isotropic voxel grid: counts, spacing, corner offset (mm)."""

    dims: tuple[int, int, int]
    voxel_size: float
    origin: tuple[float, float, float]

    def __post_init__(self):
        if any(d < 1 for d in self.dims):
            raise ValidationError(f"all dims must be >= 1, got {self.dims}")
        if self.voxel_size <= 0:
            raise ValidationError(f"voxel_size must be > 0, got {self.voxel_size}")

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def extent(self) -> np.ndarray:
        """Physical size of the grid along each axis, mm."""
        return np.asarray(self.dims, dtype=float) * self.voxel_size

    @property
    def bounding_radius(self) -> float:
        """Radius of the sphere around the world origin containing the grid."""
        lo = np.asarray(self.origin)
        hi = lo + self.extent
        corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                            for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        return float(np.max(np.linalg.norm(corners, axis=1)))

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.voxel_size

    def flat_index(self, ix, iy, iz):
        nx, ny, _ = self.dims
        return ix + nx * (iy + ny * iz)

    def unflatten(self, flat):
        nx, ny, _ = self.dims
        flat = np.asarray(flat)
        return flat % nx, (flat // nx) % ny, flat // (nx * ny)

    def voxel_centers(self, flat) -> np.ndarray:
        """Centers of the given flat voxel indices, shape (n, 3)."""
        ix, iy, iz = self.unflatten(flat)
        h = self.voxel_size
        return np.stack(
            [self.origin[0] + (ix + 0.5) * h,
             self.origin[1] + (iy + 0.5) * h,
             self.origin[2] + (iz + 0.5) * h], axis=-1)

    def point_to_voxel(self, point) -> tuple[int, int, int] | None:
        """Floor-based lookup; None if the point is outside the grid."""
        idx = np.floor((np.asarray(point, dtype=float) - np.asarray(self.origin))
                       / self.voxel_size).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.dims)):
            return None
        return int(idx[0]), int(idx[1]), int(idx[2])


@dataclass(frozen=True)
class TargetSpec:
    """Axis-aligned cylindrical target (capillary tube along z)."""

    center: tuple[float, float, float]
    radius: float
    height: float
    concentration: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValidationError(f"target radius must be > 0, got {self.radius}")
        if self.height <= 0:
            raise ValidationError(f"target height must be > 0, got {self.height}")
        if self.concentration < 0:
            raise ValidationError(
                f"target concentration must be >= 0, got {self.concentration}")


class VoxelPhantom:
    """Immutable voxel phantom: uniform background + per-voxel concentration (uM).

    ``concentration`` and ``inside_mask`` are (nx, ny, nz) arrays; both are
    frozen after construction so phantoms are safe for shared reads.
    """

    def __init__(self, grid: Grid, background: TissueProperties,
                 concentration: np.ndarray, inside_mask: np.ndarray):
        concentration = np.ascontiguousarray(concentration, dtype=np.float64)
        inside_mask = np.ascontiguousarray(inside_mask, dtype=bool)
        if concentration.shape != grid.dims or inside_mask.shape != grid.dims:
            raise ValidationError(
                f"array shape {concentration.shape} does not match dims {grid.dims}")
        if np.any(concentration < 0):
            raise ValidationError("concentration must be >= 0 everywhere")
        if np.any(concentration[~inside_mask] != 0):
            raise ValidationError("concentration must be 0 outside inside_mask")
        concentration.flags.writeable = False
        inside_mask.flags.writeable = False
        self.grid = grid
        self.background = background
        self.concentration = concentration
        self.inside_mask = inside_mask

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.grid.dims

    @property
    def voxel_size(self) -> float:
        return self.grid.voxel_size

    @property
    def origin(self) -> tuple[float, float, float]:
        return self.grid.origin

    def concentration_flat(self) -> np.ndarray:
        """Concentration as a flat x-fastest vector (matrix column order)."""
        return self.concentration.ravel(order="F")

    def mu_x_flat(self) -> np.ndarray:
        """Per-voxel X-ray attenuation: background inside the object, 0 outside."""
        return np.where(self.inside_mask.ravel(order="F"), self.background.mu_x, 0.0)

    def support_radius(self) -> float:
        """Radial extent of the object support, from masked voxel centers."""
        if not self.inside_mask.any():
            return 0.0
        flat = np.flatnonzero(self.inside_mask.ravel(order="F"))
        centers = self.grid.voxel_centers(flat)
        return float(np.max(np.hypot(centers[:, 0], centers[:, 1]))) + self.voxel_size / 2


@dataclass(frozen=True)
class PointSample:
    """Result of a point lookup: background properties + local concentration."""

    properties: TissueProperties
    concentration: float
    inside: bool


def _axis_count(length: float, voxel_size: float) -> int:
    # ceil with a small epsilon so exact multiples do not round up.
    return int(math.ceil(length / voxel_size - 1e-9))


def build_cylinder_phantom(diameter: float, height: float, voxel_size: float,
                           background: TissueProperties = SOFT_TISSUE) -> VoxelPhantom:
    """Empty cylinder phantom centered on the rotation axis.

    The grid is centered at the world origin on all three axes; inside_mask is
    true exactly for voxel centers within the cylinder; concentration is zero.
    """
    if diameter <= 0 or height <= 0 or voxel_size <= 0:
        raise ValidationError(
            f"diameter, height and voxel_size must be > 0, got "
            f"({diameter}, {height}, {voxel_size})")
    nx = _axis_count(diameter, voxel_size)
    nz = _axis_count(height, voxel_size)
    for name, n in (("nx", nx), ("ny", nx), ("nz", nz)):
        if n > MAX_DIM:
            raise CapacityError(f"{name}={n} exceeds the {MAX_DIM}-voxel axis cap")
    dims = (nx, nx, nz)
    origin = (-nx * voxel_size / 2, -nx * voxel_size / 2, -nz * voxel_size / 2)
    grid = Grid(dims, voxel_size, origin)
    cx = grid.axis_centers(0)
    cy = grid.axis_centers(1)
    r2 = (diameter / 2) ** 2
    in_disk = (cx[:, None] ** 2 + cy[None, :] ** 2) <= r2
    inside = np.repeat(in_disk[:, :, None], nz, axis=2)
    return VoxelPhantom(grid, background, np.zeros(dims), inside)


def add_capillary_target(phantom: VoxelPhantom, target: TargetSpec) -> VoxelPhantom:
    """Return a new phantom with the target's concentration painted in.

    Voxels whose centers lie inside the target cylinder get the target
    concentration; everything else is unchanged. The target must sit fully
    inside the object support (checked analytically against the support
    radius and the grid z extent).
    """
    g = phantom.grid
    r_support = phantom.support_radius()
    cx, cy, cz = target.center
    if math.hypot(cx, cy) + target.radius > r_support + _CONTAINMENT_TOL:
        raise GeometryError(
            f"target at ({cx}, {cy}) with radius {target.radius} protrudes beyond "
            f"the object support radius {r_support:.6g}")
    z_lo, z_hi = g.origin[2], g.origin[2] + g.dims[2] * g.voxel_size
    if cz - target.height / 2 < z_lo - _CONTAINMENT_TOL or \
            cz + target.height / 2 > z_hi + _CONTAINMENT_TOL:
        raise GeometryError(
            f"target z extent [{cz - target.height / 2}, {cz + target.height / 2}] "
            f"protrudes beyond the phantom z extent [{z_lo}, {z_hi}]")

    ax = g.axis_centers(0)
    ay = g.axis_centers(1)
    az = g.axis_centers(2)
    in_disk = ((ax[:, None] - cx) ** 2 + (ay[None, :] - cy) ** 2) <= target.radius ** 2
    in_z = np.abs(az - cz) <= target.height / 2
    member = in_disk[:, :, None] & in_z[None, None, :]
    concentration = phantom.concentration.copy()
    concentration[member] = target.concentration
    return VoxelPhantom(g, phantom.background, concentration, phantom.inside_mask)


def add_uniform_background(phantom: VoxelPhantom, concentration: float) -> VoxelPhantom:
    """Raise every inside voxel to at least the given concentration (uM).

    Models a nonspecific-uptake floor. Uses max(current, given) per voxel, so
    the result does not depend on the order relative to brighter targets.
    """
    if concentration < 0:
        raise ValidationError(
            f"background concentration must be >= 0, got {concentration}")
    conc = np.maximum(phantom.concentration,
                      np.where(phantom.inside_mask, concentration, 0.0))
    return VoxelPhantom(phantom.grid, phantom.background, conc,
                        phantom.inside_mask)


def property_at(phantom: VoxelPhantom, point) -> PointSample:
    """Nearest-voxel lookup; points outside the grid read as background, c = 0."""
    idx = phantom.grid.point_to_voxel(point)
    if idx is None:
        return PointSample(phantom.background, 0.0, False)
    return PointSample(phantom.background,
                       float(phantom.concentration[idx]),
                       bool(phantom.inside_mask[idx]))
