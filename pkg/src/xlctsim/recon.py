"""Reconstruction solvers: MLEM, FISTA with nonnegative L1, parallel-beam FBP.

MLEM is the count-statistics-appropriate solver for the Poisson XLCT data;
FISTA-L1 exploits the sparsity of capillary targets. Both are provided so
results can be cross-checked. FBP inverts the simultaneously acquired
pencil-beam CT sinogram.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateOperatorError, ValidationError
from .phantom import Grid
from .forward import SystemMatrix, apply, apply_adjoint

#: Safety factor applied to the power-iteration spectral estimate.
LIPSCHITZ_SAFETY = 1.05

_UNIFORMITY_TOL = 1e-9


@dataclass
class SolverConfig:
    max_iters: int = 100
    lam: float = 0.0            # L1 weight (FISTA only)
    tolerance: float = 0.0      # relative objective-change stop; 0 = fixed iters
    lipschitz_iters: int = 30
    epsilon_floor: float = 1e-12

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if self.tolerance < 0:
            raise ValidationError(f"tolerance must be >= 0, got {self.tolerance}")
        if self.lipschitz_iters < 1:
            raise ValidationError(
                f"lipschitz_iters must be >= 1, got {self.lipschitz_iters}")
        if self.epsilon_floor <= 0:
            raise ValidationError(
                f"epsilon_floor must be > 0, got {self.epsilon_floor}")


@dataclass
class ReconVolume:
    """Reconstructed volume on a grid (uM for XLCT, 1/mm for CT)."""

    grid: Grid
    values: np.ndarray              # (nx, ny, nz)
    iterations_run: int = 0
    objective_trace: np.ndarray = field(default_factory=lambda: np.empty(0))

    def values_flat(self) -> np.ndarray:
        return self.values.ravel(order="F")


def _volume_from_flat(grid: Grid, x: np.ndarray, iterations: int,
                      trace) -> ReconVolume:
    values = np.asarray(x, dtype=float).reshape(grid.dims, order="F")
    return ReconVolume(grid=grid, values=values, iterations_run=iterations,
                       objective_trace=np.asarray(trace, dtype=float))


def _poisson_loglike(y: np.ndarray, yhat: np.ndarray, eps: float) -> float:
    # Up to the constant -sum(log y!), with the same floor the update uses.
    return float(np.sum(y * np.log(yhat + eps) - yhat))


def _converged(trace: list[float], tolerance: float) -> bool:
    if tolerance <= 0 or len(trace) < 2:
        return False
    prev, cur = trace[-2], trace[-1]
    scale = abs(prev) if prev != 0 else 1.0
    return abs(cur - prev) / scale < tolerance


def mlem(A: SystemMatrix, y: np.ndarray, cfg: SolverConfig,
         init: np.ndarray | None = None) -> ReconVolume:
    """Multiplicative EM updates for Poisson counts; nonnegative by construction.

    Voxels with zero column sum are pinned at 0; everything else starts at the
    given positive init (default uniform 1). The Poisson log-likelihood of each
    iterate is recorded in the objective trace.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (A.n_rows,):
        raise ValidationError(f"y has shape {y.shape}, expected ({A.n_rows},)")
    if np.any(y < 0):
        raise ValidationError("counts must be >= 0")
    M = A.matrix
    sens = np.asarray(M.sum(axis=0)).ravel()
    active = sens > 0
    if init is None:
        x = np.where(active, 1.0, 0.0)
    else:
        x = np.asarray(init, dtype=float).copy()
        if x.shape != (A.n_cols,):
            raise ValidationError(
                f"init has shape {x.shape}, expected ({A.n_cols},)")
        if np.any(x <= 0):
            raise ValidationError("init must be > 0 everywhere")
        x[~active] = 0.0
    safe_sens = np.where(active, sens, 1.0)
    eps = cfg.epsilon_floor

    trace: list[float] = []
    yhat = M @ x
    it = 0
    for it in range(1, cfg.max_iters + 1):
        back = M.T @ (y / (yhat + eps))
        x = np.where(active, x * back / safe_sens, 0.0)
        yhat = M @ x
        trace.append(_poisson_loglike(y, yhat, eps))
        if _converged(trace, cfg.tolerance):
            break
    return _volume_from_flat(A.grid, x, it, trace)


def power_iteration_lipschitz(A: SystemMatrix, iters: int, seed: int = 0) -> float:
    """Estimate of ||A||_2^2 (largest eigenvalue of A^T A) times a 1.05 margin.

    The Rayleigh-quotient sequence of power iteration on the PSD operator
    A^T A is non-decreasing, so more iterations never lower the estimate.
    """
    if iters < 1:
        raise ValidationError(f"iters must be >= 1, got {iters}")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.n_cols)
    v /= np.linalg.norm(v)
    rho = 0.0
    for _ in range(iters):
        w = A.matrix @ v
        rho = float(w @ w)
        if rho == 0.0:
            return 0.0
        u = A.matrix.T @ w
        nu = np.linalg.norm(u)
        if nu == 0.0:
            break
        v = u / nu
    return LIPSCHITZ_SAFETY * rho


def fista_l1(A: SystemMatrix, y: np.ndarray, cfg: SolverConfig) -> ReconVolume:
    """Minimize 0.5 ||Ax - y||^2 + lambda ||x||_1 over x >= 0.

    Accelerated proximal gradient with step 1/L (L from power iteration) and
    the nonnegative soft-threshold prox max(0, v - lambda/L). Plain FISTA is
    not monotone, so the best-objective iterate is returned; the per-iteration
    objective is recorded in the trace.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (A.n_rows,):
        raise ValidationError(f"y has shape {y.shape}, expected ({A.n_rows},)")
    L = power_iteration_lipschitz(A, cfg.lipschitz_iters)
    if L <= 0.0:
        raise DegenerateOperatorError("operator norm estimate is zero")
    M = A.matrix
    lam = cfg.lam

    def objective(x, rx):
        return 0.5 * float(rx @ rx) + lam * float(np.abs(x).sum())

    x_prev = np.zeros(A.n_cols)
    z = x_prev
    t = 1.0
    best_x = x_prev
    best_obj = objective(x_prev, -y)
    trace: list[float] = []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        grad = M.T @ (M @ z - y)
        x = np.maximum(0.0, z - grad / L - lam / L)
        r = M @ x - y
        obj = objective(x, r)
        trace.append(obj)
        if obj < best_obj:
            best_obj = obj
            best_x = x
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        z = x + ((t - 1.0) / t_next) * (x - x_prev)
        x_prev = x
        t = t_next
        if _converged(trace, cfg.tolerance):
            break
    return _volume_from_flat(A.grid, best_x, it, trace)


def l1_weight_heuristic(A: SystemMatrix, y: np.ndarray, fraction: float = 0.02) -> float:
    """Default lambda: a fixed fraction of ||A^T y||_inf.

    ||A^T y||_inf is the smallest lambda for which x = 0 is optimal, so the
    fraction directly sets how aggressively the solution is sparsified.
    """
    if not 0 < fraction < 1:
        raise ValidationError(f"fraction must be in (0, 1), got {fraction}")
    scale = float(np.max(np.abs(apply_adjoint(A, np.asarray(y, dtype=float)))))
    return fraction * scale


def _check_uniform(values: np.ndarray, name: str) -> float:
    d = np.diff(values)
    if len(d) == 0:
        return 0.0
    if np.any(np.abs(d - d[0]) > _UNIFORMITY_TOL * max(abs(d[0]), 1e-30)):
        raise ValidationError(f"{name} must be uniformly sampled")
    return float(d[0])


def fbp_parallel(sinogram: np.ndarray, angles: np.ndarray, s_centers: np.ndarray,
                 grid: Grid, filter_name: str = "ramp") -> ReconVolume:
    """Parallel-beam filtered backprojection of one transverse slice.

    The ramp filter |nu| is applied in the frequency domain on projections
    zero-padded to the next power of two (at least twice the projection
    length); frequencies are in cycles per sample so the Nyquist cap is 0.5,
    and the 1/delta_s scale is applied after filtering. "ramp-hann" multiplies
    the ramp by a Hann window 0.5 (1 + cos(2 pi nu)). Backprojection uses
    linear interpolation and the pi / n_angles angular weight.
    """
    sino = np.asarray(sinogram, dtype=float)
    angles = np.asarray(angles, dtype=float)
    s_centers = np.asarray(s_centers, dtype=float)
    if sino.ndim != 2 or sino.shape != (len(angles), len(s_centers)):
        raise ValidationError(
            f"sinogram shape {sino.shape} does not match "
            f"({len(angles)}, {len(s_centers)})")
    if grid.dims[2] != 1:
        raise ValidationError("fbp_parallel reconstructs a single z slice")
    n_ang = len(angles)
    dtheta = _check_uniform(angles, "angles")
    if n_ang > 1 and abs(dtheta - math.pi / n_ang) > 1e-6:
        raise ValidationError(
            f"angles must uniformly cover [0, pi): spacing {dtheta:.6g} != "
            f"pi / {n_ang}")
    if np.any(angles < -1e-9) or np.any(angles >= math.pi):
        raise ValidationError("angles must lie in [0, pi)")
    ds = _check_uniform(s_centers, "lateral samples")
    if ds <= 0:
        raise ValidationError("lateral samples must be increasing")

    n_s = len(s_centers)
    n_pad = 1 << max(2, int(math.ceil(math.log2(2 * n_s))))
    nu = np.fft.rfftfreq(n_pad)          # cycles/sample, 0 .. 0.5
    kernel = nu.copy()
    if filter_name == "ramp-hann":
        kernel *= 0.5 * (1.0 + np.cos(2.0 * math.pi * nu))
    elif filter_name != "ramp":
        raise ValidationError(f"unknown filter '{filter_name}'")
    spec = np.fft.rfft(sino, n=n_pad, axis=1)
    filtered = np.fft.irfft(spec * kernel[None, :], n=n_pad, axis=1)[:, :n_s] / ds

    cx = grid.axis_centers(0)
    cy = grid.axis_centers(1)
    X = cx[:, None]
    Y = cy[None, :]
    image = np.zeros(grid.dims[:2])
    for theta, row in zip(angles, filtered):
        s_val = -X * math.sin(theta) + Y * math.cos(theta)
        image += np.interp(s_val, s_centers, row, left=0.0, right=0.0)
    image *= math.pi / n_ang
    return ReconVolume(grid=grid, values=image[:, :, None])
