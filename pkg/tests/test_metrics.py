import math

import numpy as np
import pytest

from xlctsim import (LineProfile, cnr, dice, estimate_scan_time,
                     estimate_step_scan_time, line_profile_fwhm, make_protocol,
                     sample_profile)
from xlctsim.errors import (DegenerateBackgroundError, EmptySegmentationError,
                            NoPeakError, TruncatedProfileError, ValidationError)
from xlctsim.phantom import Grid
from xlctsim.recon import ReconVolume


def _volume_1d(values: np.ndarray, h: float) -> ReconVolume:
    n = len(values)
    grid = Grid((n, 1, 1), h, (-n * h / 2, -h / 2, -h / 2))
    return ReconVolume(grid=grid, values=values.reshape(n, 1, 1))


def _gaussian_volume(sigma=0.2, h=0.02, half=2.0):
    n = int(round(2 * half / h)) + 1
    x = (np.arange(n) + 0.5) * h - (n * h) / 2
    return _volume_1d(np.exp(-x ** 2 / (2 * sigma ** 2)), h)


def test_gaussian_fwhm():
    vol = _gaussian_volume(sigma=0.2)
    profile = LineProfile((-1.5, 0.0, 0.0), (1.5, 0.0, 0.0), n_samples=301)
    got = line_profile_fwhm(vol, profile)
    assert abs(got - 2.3548200450309493 * 0.2) <= profile.spacing  # 0.471 mm


def test_rectangular_pulse_fwhm():
    h = 0.05
    values = np.zeros(81)
    values[30:50] = 1.0          # 20 voxels = 1.0 mm wide box
    vol = _volume_1d(values, h)
    profile = LineProfile((-2.0, 0.0, 0.0), (2.0, 0.0, 0.0), n_samples=401)
    got = line_profile_fwhm(vol, profile)
    assert abs(got - 1.0) <= profile.spacing + h


def test_constant_profile_has_no_peak():
    vol = _volume_1d(np.full(21, 3.0), 0.1)
    profile = LineProfile((-1.0, 0.0, 0.0), (1.0, 0.0, 0.0), n_samples=21)
    with pytest.raises(NoPeakError):
        line_profile_fwhm(vol, profile)


def test_truncated_profile_error():
    vol = _gaussian_volume(sigma=0.5, h=0.02, half=2.0)
    # window ends inside the peak: right side never reaches the half level
    profile = LineProfile((-1.8, 0.0, 0.0), (0.1, 0.0, 0.0), n_samples=101)
    with pytest.raises(TruncatedProfileError):
        line_profile_fwhm(vol, profile)


def test_profile_needs_three_samples():
    with pytest.raises(ValidationError):
        LineProfile((0, 0, 0), (1, 0, 0), n_samples=2)


def test_fwhm_error_shrinks_with_sampling():
    vol = _gaussian_volume(sigma=0.2, h=0.005, half=1.5)
    truth = 2.3548200450309493 * 0.2
    errors = []
    for n in (21, 41, 81):
        profile = LineProfile((-1.0, 0.0, 0.0), (1.0, 0.0, 0.0), n_samples=n)
        errors.append(abs(line_profile_fwhm(vol, profile) - truth))
    assert errors[2] < errors[1] < errors[0]


def test_sample_profile_outside_grid_reads_zero():
    vol = _volume_1d(np.ones(11), 0.1)
    profile = LineProfile((5.0, 0.0, 0.0), (6.0, 0.0, 0.0), n_samples=5)
    assert np.all(sample_profile(vol, profile) == 0.0)


# ---------------------------------------------------------------------------
# CNR / Dice

def test_cnr_zero_when_means_equal():
    img = np.array([1.0, 1.0, 0.0, 2.0])
    target = np.array([True, True, False, False])
    background = np.array([False, False, True, True])
    assert cnr(img, target, background) == 0.0


def test_cnr_hand_value():
    img = np.array([5.0, 5.0, 0.0, 2.0])
    target = np.array([True, True, False, False])
    background = np.array([False, False, True, True])
    # background mean 1, population std 1 -> (5 - 1) / 1 = 4
    assert cnr(img, target, background) == pytest.approx(4.0)


def test_cnr_scale_invariant():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 5, 50)
    target = np.zeros(50, dtype=bool)
    target[:10] = True
    background = ~target
    assert cnr(3.7 * img, target, background) == \
        pytest.approx(cnr(img, target, background), rel=1e-12)


def test_cnr_validation():
    img = np.ones(4)
    with pytest.raises(ValidationError):
        cnr(img, np.array([1, 1, 0, 0], bool), np.array([1, 0, 1, 1], bool))
    with pytest.raises(ValidationError):
        cnr(img, np.array([1, 0, 0, 0], bool), np.array([0, 1, 1, 0], bool))
    with pytest.raises(DegenerateBackgroundError):
        cnr(img, np.array([1, 1, 0, 0], bool), np.array([0, 0, 1, 1], bool))


def test_dice_perfect_and_disjoint():
    img = np.array([1.0, 1.0, 0.0, 0.0])
    assert dice(img, np.array([1, 1, 0, 0], bool), 0.5) == 1.0
    assert dice(img, np.array([0, 0, 1, 1], bool), 0.5) == 0.0


def test_dice_half_overlap():
    img = np.zeros(8)
    img[:2] = 1.0                      # segmentation: 2 voxels
    truth = np.zeros(8, dtype=bool)
    truth[:4] = True                   # truth: 4 voxels, fully covering seg
    assert dice(img, truth, 0.5) == pytest.approx(2 * 2 / (2 + 4))  # 2/3


def test_dice_symmetry_on_binary_masks():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=30) > 0.5
    b = rng.uniform(size=30) > 0.5
    if not a.any():
        a[0] = True
    if not b.any():
        b[0] = True
    assert dice(a.astype(float), b, 0.5) == dice(b.astype(float), a, 0.5)


def test_dice_empty_image():
    with pytest.raises(EmptySegmentationError):
        dice(np.zeros(5), np.ones(5, bool), 0.5)
    with pytest.raises(ValidationError):
        dice(np.ones(5), np.ones(5, bool), 1.5)


# ---------------------------------------------------------------------------
# timing

def test_scan_time_demo_parameters_hit_43s():
    p = make_protocol(fov=30.0, n_angles=6, stage_speed=5.0, bin_time=0.02,
                      turnaround_time=1.17)
    t = estimate_scan_time(p)
    assert t.per_slice == pytest.approx(6 * (30 / 5 + 1.17), rel=1e-12)
    assert abs(t.per_slice - 43.0) < 0.05      # transverse-scan anchor


def test_scan_time_speed_halving():
    slow = make_protocol(fov=30.0, n_angles=4, stage_speed=5.0,
                         turnaround_time=0.0)
    fast = make_protocol(fov=30.0, n_angles=4, stage_speed=10.0,
                         turnaround_time=0.0)
    assert estimate_scan_time(fast).per_slice == \
        pytest.approx(estimate_scan_time(slow).per_slice / 2)


def test_scan_time_linear_in_angles_and_slices():
    base = make_protocol(fov=20.0, n_angles=5, slices=(0.0,))
    double_angles = make_protocol(fov=20.0, n_angles=10, slices=(0.0,))
    three_slices = make_protocol(fov=20.0, n_angles=5, slices=(0.0, 1.0, 2.0))
    t0 = estimate_scan_time(base)
    assert estimate_scan_time(double_angles).per_slice == \
        pytest.approx(2 * t0.per_slice)
    t3 = estimate_scan_time(three_slices)
    assert t3.total == pytest.approx(3 * t0.total)
    assert t3.per_slice == pytest.approx(t0.per_slice)


def test_step_scan_ratio_computable():
    # same sampling as the fly scan, plus a settle per step
    p = make_protocol(fov=30.0, n_angles=6, stage_speed=5.0, bin_time=0.02,
                      turnaround_time=1.17)
    step = estimate_step_scan_time(p, settle_time=0.12)
    fly = estimate_scan_time(p)
    assert step.per_slice > fly.per_slice
    assert step.per_slice / fly.per_slice > 5
    with pytest.raises(ValidationError):
        estimate_step_scan_time(p, settle_time=-1.0)
