import math

import numpy as np
import pytest

from xlctsim import (BeamPose, Ray, TissueProperties, beam_fluence, beam_ray,
                     build_cylinder_phantom, detector_ring, detector_weight,
                     diffusion_params, greens_cw, siddon_trace,
                     xray_line_integral)
from xlctsim.errors import ValidationError
from xlctsim.phantom import Grid, VoxelPhantom
from xlctsim.transport import FWHM_TO_SIGMA


def _slab_phantom(dims, voxel_size, mu_x, origin=None):
    """Phantom whose object support fills the whole grid."""
    if origin is None:
        origin = tuple(-d * voxel_size / 2 for d in dims)
    grid = Grid(dims, voxel_size, origin)
    bg = TissueProperties(mu_a=0.01, mu_s_prime=1.0, mu_x=mu_x)
    return VoxelPhantom(grid, bg, np.zeros(dims), np.ones(dims, dtype=bool))


# ---------------------------------------------------------------------------
# siddon_trace

def test_axis_aligned_ray_through_four_voxels():
    grid = Grid((4, 1, 1), 0.5, (0.0, 0.0, 0.0))
    ray = Ray(origin=np.array([-1.0, 0.25, 0.25]),
              direction=np.array([1.0, 0.0, 0.0]))
    tr = siddon_trace(grid, ray)
    assert len(tr) == 4
    assert np.allclose(tr.lengths, 0.5)
    assert list(tr.voxels) == [0, 1, 2, 3]


def test_missing_ray_yields_empty_trace():
    grid = Grid((4, 4, 4), 0.5, (0.0, 0.0, 0.0))
    ray = Ray(origin=np.array([-1.0, 10.0, 0.0]),
              direction=np.array([1.0, 0.0, 0.0]))
    assert len(siddon_trace(grid, ray)) == 0


def test_zero_direction_rejected():
    grid = Grid((4, 4, 4), 0.5, (0.0, 0.0, 0.0))
    with pytest.raises(ValidationError):
        siddon_trace(grid, Ray(origin=np.zeros(3), direction=np.zeros(3)))


def test_diagonal_ray_against_dense_sampling():
    # 45 degree in-plane ray crossing one 1 mm voxel layer: total sqrt(2),
    # oracle = uniform dense sampling of the segment
    grid = Grid((4, 1, 1), 1.0, (0.0, 0.0, 0.0))
    d = np.array([1.0, 1.0, 0.0]) / math.sqrt(2)
    o = np.array([0.5, -0.5, 0.5])
    tr = siddon_trace(grid, Ray(origin=o, direction=d))
    assert tr.total_length == pytest.approx(math.sqrt(2), rel=1e-12)

    n = 4_000_000
    t0, t1 = math.sqrt(2) * 0.5, math.sqrt(2) * 1.5   # entry/exit of the layer
    ts = t0 + (np.arange(n) + 0.5) * (t1 - t0) / n
    pts = o[None, :] + ts[:, None] * d[None, :]
    ijk = np.floor(pts).astype(int)
    ok = np.all((ijk >= 0) & (ijk < [4, 1, 1]), axis=1)
    flat = ijk[ok, 0]
    brute = np.bincount(flat, minlength=4) * (t1 - t0) / n
    got = np.zeros(4)
    got[tr.voxels] = tr.lengths
    assert np.allclose(got, brute, atol=1e-6)


def _chord_oracle(origin, direction, lo, hi):
    t0, t1 = -math.inf, math.inf
    for k in range(3):
        if abs(direction[k]) < 1e-14:
            if origin[k] < lo[k] or origin[k] > hi[k]:
                return 0.0
            continue
        ta = (lo[k] - origin[k]) / direction[k]
        tb = (hi[k] - origin[k]) / direction[k]
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
    return max(0.0, t1 - t0)


def test_siddon_exactness_1000_random_rays():
    grid = Grid((13, 9, 7), 0.37, (-2.0, -1.5, -1.0))
    lo = np.array(grid.origin)
    hi = lo + grid.extent
    rng = np.random.default_rng(42)
    for _ in range(1000):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        o = rng.uniform(-6, 6, size=3) - 10 * d
        chord = _chord_oracle(o, d, lo, hi)
        tr = siddon_trace(grid, Ray(origin=o, direction=d))
        if chord == 0.0:
            assert len(tr) == 0
        else:
            assert abs(tr.total_length - chord) < 1e-9 * chord
            assert np.all(tr.lengths > 0)


# ---------------------------------------------------------------------------
# xray_line_integral

def test_homogeneous_chord_product():
    ph = _slab_phantom((100, 5, 1), 0.1, mu_x=0.02)
    ray = Ray(origin=np.array([-20.0, 0.0, 0.0]),
              direction=np.array([1.0, 0.0, 0.0]))
    # 10 mm chord of mu_x = 0.02 -> 0.2
    assert xray_line_integral(ph, ray) == pytest.approx(0.2, rel=1e-12)


def test_line_integral_miss_is_zero():
    ph = _slab_phantom((10, 10, 1), 0.1, mu_x=0.02)
    ray = Ray(origin=np.array([-20.0, 50.0, 0.0]),
              direction=np.array([1.0, 0.0, 0.0]))
    assert xray_line_integral(ph, ray) == 0.0


def test_off_center_cylinder_chords():
    ph = build_cylinder_phantom(10.0, 0.2, 0.1)
    for s in (0.0, 1.0, 2.0, 3.3, 4.0):
        ray = beam_ray(BeamPose(theta=0.3, s=s, z=0.0, fwhm=0.15), standoff=50)
        analytic = 2 * 0.02 * math.sqrt(5.0 ** 2 - s ** 2)
        tol = 0.02 * 0.1   # one voxel length of attenuation
        assert abs(xray_line_integral(ph, ray) - analytic) <= tol


# ---------------------------------------------------------------------------
# beam_fluence

def test_on_axis_fluence_without_attenuation():
    ph = _slab_phantom((101, 11, 1), 0.1, mu_x=0.0)
    dep = beam_fluence(ph, BeamPose(theta=0.0, s=0.0, z=0.0, fwhm=0.2), i0=3.0)
    centers = ph.grid.voxel_centers(dep.voxels)
    on_axis = np.abs(centers[:, 1]) < 1e-12
    assert on_axis.sum() == 101
    assert np.allclose(dep.values[on_axis], 3.0, rtol=1e-12)


def test_fluence_half_at_half_fwhm_offset():
    ph = _slab_phantom((101, 11, 1), 0.1, mu_x=0.0)
    dep = beam_fluence(ph, BeamPose(theta=0.0, s=0.0, z=0.0, fwhm=0.2), i0=1.0)
    centers = ph.grid.voxel_centers(dep.voxels)
    at_half = np.abs(centers[:, 1] - 0.1) < 1e-12   # d_perp = fwhm / 2
    assert at_half.any()
    assert np.allclose(dep.values[at_half], 0.5, rtol=1e-12)


def test_fluence_attenuated_5mm_past_entry():
    # 0.4 mm voxels put the center of voxel 12 exactly 5 mm past grid entry
    ph = _slab_phantom((30, 5, 1), 0.4, mu_x=0.02)
    dep = beam_fluence(ph, BeamPose(theta=0.0, s=0.0, z=0.0, fwhm=0.3), i0=1.0)
    centers = ph.grid.voxel_centers(dep.voxels)
    entry_x = ph.grid.origin[0]
    pick = (np.abs(centers[:, 0] - (entry_x + 5.0)) < 1e-12) \
        & (np.abs(centers[:, 1]) < 1e-12)
    assert pick.sum() == 1
    assert dep.values[pick][0] == pytest.approx(math.exp(-0.1), rel=1e-9)  # 0.9048


def test_fluence_monotone_decreasing_along_beam():
    ph = _slab_phantom((101, 11, 1), 0.1, mu_x=0.05)
    dep = beam_fluence(ph, BeamPose(theta=0.0, s=0.0, z=0.0, fwhm=0.2), i0=1.0)
    centers = ph.grid.voxel_centers(dep.voxels)
    on_axis = np.abs(centers[:, 1]) < 1e-12
    xs = centers[on_axis, 0]
    vals = dep.values[on_axis][np.argsort(xs)]
    assert np.all(np.diff(vals) < 0)


def test_fluence_linear_in_i0():
    ph = build_cylinder_phantom(5.0, 0.2, 0.1)
    pose = BeamPose(theta=0.7, s=0.8, z=0.0, fwhm=0.15)
    a = beam_fluence(ph, pose, i0=1.0)
    b = beam_fluence(ph, pose, i0=7.5)
    assert np.array_equal(a.voxels, b.voxels)
    assert np.allclose(b.values, 7.5 * a.values, rtol=1e-14)


def test_fluence_support_is_exactly_the_3_sigma_tube():
    # brute force over every voxel of a small grid
    ph = _slab_phantom((21, 19, 5), 0.2, mu_x=0.01)
    pose = BeamPose(theta=0.4, s=0.3, z=0.1, fwhm=0.3)
    dep = beam_fluence(ph, pose, i0=1.0)
    sigma = pose.fwhm / FWHM_TO_SIGMA
    ray = beam_ray(pose, standoff=100.0)
    all_centers = ph.grid.voxel_centers(np.arange(ph.grid.n_voxels))
    w = all_centers - ray.origin
    t = w @ ray.direction
    perp = w - t[:, None] * ray.direction[None, :]
    d = np.linalg.norm(perp, axis=1)
    expected = set(np.flatnonzero(d <= 3 * sigma))
    assert set(dep.voxels.tolist()) == expected
    assert np.all(dep.values >= 0)


def test_invalid_fluence_inputs():
    ph = build_cylinder_phantom(5.0, 0.2, 0.1)
    with pytest.raises(ValidationError):
        beam_fluence(ph, BeamPose(theta=0.0, s=0.0, z=0.0, fwhm=0.15), i0=0.0)
    with pytest.raises(ValidationError):
        BeamPose(theta=0.0, s=0.0, z=0.0, fwhm=-1.0)


# ---------------------------------------------------------------------------
# diffusion_params / greens_cw / detector_weight

def test_diffusion_params_reference_values():
    opt = diffusion_params(0.01, 1.0)
    assert opt.D == pytest.approx(0.33003, abs=5e-6)
    assert opt.mu_eff == pytest.approx(0.17407, abs=5e-6)


def test_mu_eff_sqrt_scaling():
    base = diffusion_params(0.01, 10.0)
    scaled = diffusion_params(0.04, 10.0)
    assert scaled.mu_eff / base.mu_eff == pytest.approx(2.0, abs=0.01)


def test_diffusion_identity():
    rng = np.random.default_rng(5)
    for _ in range(50):
        mu_a = rng.uniform(1e-4, 0.5)
        mu_s = rng.uniform(0.1, 5.0)
        opt = diffusion_params(mu_a, mu_s)
        assert opt.mu_eff ** 2 * opt.D == pytest.approx(mu_a, rel=1e-12)
    with pytest.raises(ValidationError):
        diffusion_params(0.0, 1.0)


def test_greens_reciprocity_exact():
    opt = diffusion_params(0.01, 1.0)
    rng = np.random.default_rng(11)
    for _ in range(100):
        a, b = rng.uniform(-10, 10, size=(2, 3))
        assert greens_cw(a, b, opt) == greens_cw(b, a, opt)


def test_greens_reference_value_at_10mm():
    opt = diffusion_params(0.01, 1.0)
    g = greens_cw((0.0, 0.0, 0.0), (10.0, 0.0, 0.0), opt)
    # e^-1.7407 / (4 pi 0.33003 10)
    assert g == pytest.approx(4.2292e-3, rel=1e-4)
    assert g == pytest.approx(math.exp(-opt.mu_eff * 10) / (4 * math.pi * opt.D * 10))


def test_greens_monotone_decreasing():
    opt = diffusion_params(0.02, 2.0)
    rs = np.linspace(0.5, 30.0, 100)
    vals = [greens_cw((0, 0, 0), (r, 0, 0), opt) for r in rs]
    assert np.all(np.diff(vals) < 0)


def test_greens_clamped_below_r_min():
    opt = diffusion_params(0.01, 1.0)
    r_min = 0.25
    at_clamp = greens_cw((0, 0, 0), (r_min, 0, 0), opt, r_min=r_min)
    inside = greens_cw((0, 0, 0), (0.01, 0, 0), opt, r_min=r_min)
    assert inside == at_clamp
    assert math.isfinite(greens_cw((0, 0, 0), (0, 0, 0), opt, r_min=r_min))


def test_detector_weight_scales_with_sensitivity():
    opt = diffusion_params(0.01, 1.0)
    from xlctsim.scan import DetectorSet
    pos = np.array([[7.0, 0.0, 0.0]])
    d1 = DetectorSet(positions=pos, sensitivity=np.array([1.0]))
    d2 = DetectorSet(positions=pos, sensitivity=np.array([2.0]))
    tiny = DetectorSet(positions=pos, sensitivity=np.array([1e-30]))
    w1 = detector_weight((0, 0, 0), 0, d1, opt)
    assert detector_weight((0, 0, 0), 0, d2, opt) == pytest.approx(2 * w1)
    # zero sensitivity is excluded by DetectorSet validation; the weight
    # vanishes linearly in that limit
    assert detector_weight((0, 0, 0), 0, tiny, opt) == pytest.approx(1e-30 * w1)


def test_detector_weight_bad_index():
    opt = diffusion_params(0.01, 1.0)
    ring = detector_ring(4, 7.0, 0.0)
    with pytest.raises(IndexError):
        detector_weight((0, 0, 0), 4, ring, opt)


def test_detector_weight_at_clamp_distance():
    opt = diffusion_params(0.01, 1.0)
    ring = detector_ring(1, 7.0, 0.0)
    r_min = 0.1 * math.sqrt(3) / 2
    w = detector_weight((7.0, 0.0, 0.0), 0, ring, opt, r_min=r_min)
    assert w == pytest.approx(greens_cw((0, 0, 0), (r_min, 0, 0), opt, r_min=r_min))
