"""Reconstruction quality metrics and scan-duration estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import (DegenerateBackgroundError, EmptySegmentationError,
                     NoPeakError, TruncatedProfileError, ValidationError)
from .recon import ReconVolume
from .scan import ScanProtocol


@dataclass(frozen=True)
class LineProfile:
    """Sampled straight line through a volume, endpoints in mm."""

    start: tuple[float, float, float]
    end: tuple[float, float, float]
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 3:
            raise ValidationError(f"n_samples must be >= 3, got {self.n_samples}")

    @property
    def spacing(self) -> float:
        length = float(np.linalg.norm(np.subtract(self.end, self.start)))
        return length / (self.n_samples - 1)


@dataclass(frozen=True)
class TimingModel:
    """Fly-scan duration: per line, per slice and for the whole scan (s)."""

    per_line: float
    turnaround_time: float
    per_slice: float
    total: float


def sample_profile(volume: ReconVolume, profile: LineProfile) -> np.ndarray:
    """Trilinear samples along the profile; points outside the grid read 0."""
    start = np.asarray(profile.start, dtype=float)
    end = np.asarray(profile.end, dtype=float)
    ts = np.linspace(0.0, 1.0, profile.n_samples)
    pts = start[None, :] + ts[:, None] * (end - start)[None, :]
    g = volume.grid
    coords = (pts - np.asarray(g.origin)) / g.voxel_size - 0.5
    return map_coordinates(volume.values, coords.T, order=1,
                           mode="constant", cval=0.0)


def line_profile_fwhm(volume: ReconVolume, profile: LineProfile) -> float:
    """Full width at half of (peak - baseline) along the profile, mm.

    The baseline is the smaller of the two profile endpoints; half-crossings
    are located by linear interpolation walking outward from the peak.
    """
    v = sample_profile(volume, profile)
    baseline = float(min(v[0], v[-1]))
    peak_i = int(np.argmax(v))
    peak = float(v[peak_i])
    if peak <= baseline:
        raise NoPeakError("profile has no peak above its baseline")
    half = baseline + 0.5 * (peak - baseline)

    def crossing(indices, side: str) -> float:
        prev = peak_i
        for i in indices:
            if v[i] < half:
                # linear interpolation between i and the previous sample
                frac = (half - v[i]) / (v[prev] - v[i])
                return i + frac * (prev - i)
            prev = i
        raise TruncatedProfileError(
            f"profile never crosses the half level on the {side} side")

    left = crossing(range(peak_i - 1, -1, -1), "left")
    right = crossing(range(peak_i + 1, len(v)), "right")
    return (right - left) * profile.spacing


def _image_values(image) -> np.ndarray:
    if isinstance(image, ReconVolume):
        return image.values
    return np.asarray(image, dtype=float)


def cnr(image, target_mask: np.ndarray, background_mask: np.ndarray) -> float:
    """(mean(target) - mean(background)) / population std(background)."""
    values = _image_values(image)
    target_mask = np.asarray(target_mask, dtype=bool)
    background_mask = np.asarray(background_mask, dtype=bool)
    if np.any(target_mask & background_mask):
        raise ValidationError("target and background masks must be disjoint")
    if target_mask.sum() < 2 or background_mask.sum() < 2:
        raise ValidationError("each mask needs at least 2 voxels")
    bg = values[background_mask]
    std = float(bg.std())
    if std == 0.0:
        raise DegenerateBackgroundError("background has zero standard deviation")
    return float((values[target_mask].mean() - bg.mean()) / std)


def dice(image, truth_mask: np.ndarray, threshold_fraction: float) -> float:
    """Dice overlap of {image >= fraction * max} against the truth mask."""
    if not 0.0 < threshold_fraction < 1.0:
        raise ValidationError(
            f"threshold_fraction must be in (0, 1), got {threshold_fraction}")
    values = _image_values(image)
    truth_mask = np.asarray(truth_mask, dtype=bool)
    vmax = float(values.max())
    if vmax <= 0.0:
        raise EmptySegmentationError("image has no positive values to threshold")
    seg = values >= threshold_fraction * vmax
    inter = int(np.count_nonzero(seg & truth_mask))
    return 2.0 * inter / (int(seg.sum()) + int(truth_mask.sum()))


def estimate_scan_time(protocol: ScanProtocol) -> TimingModel:
    """Fly-scan duration: each projection sweeps the FOV once, plus turnaround."""
    per_line = protocol.fov / protocol.stage_speed
    per_slice = protocol.n_angles * (per_line + protocol.turnaround_time)
    return TimingModel(per_line=per_line,
                       turnaround_time=protocol.turnaround_time,
                       per_slice=per_slice,
                       total=per_slice * len(protocol.slices))


def estimate_step_scan_time(protocol: ScanProtocol, settle_time: float) -> TimingModel:
    """Step-scan variant: stop, count one gate window, move, settle, repeat.

    Provided so the speedup of the fly scan over a step scan with the same
    sampling can be computed for any settle time.
    """
    if settle_time < 0:
        raise ValidationError(f"settle_time must be >= 0, got {settle_time}")
    per_line = protocol.bins_per_line * (protocol.bin_time + settle_time)
    per_slice = protocol.n_angles * (per_line + protocol.turnaround_time)
    return TimingModel(per_line=per_line,
                       turnaround_time=protocol.turnaround_time,
                       per_slice=per_slice,
                       total=per_slice * len(protocol.slices))
