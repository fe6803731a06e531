"""On-disk artifact formats.

Volumes are stored as a text header file ``<base>.hdr`` (key=value lines)
plus a raw little-endian float32 array ``<base>.raw`` in x-fastest order,
with one 16-bit PGM preview per z slice. Measurement sets use one header
plus three raw arrays (counts u32le, means f32le, sinogram f32le). All
writers are byte-deterministic for identical inputs.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import CapacityError, FormatError
from .forward import MeasurementSet
from .phantom import Grid, TissueProperties, VoxelPhantom

VOLUME_FORMAT = "xlctsim-volume-1"
MEASUREMENTS_FORMAT = "xlctsim-measurements-1"

_U32_MAX = np.iinfo(np.uint32).max


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_header(path: Path, pairs: list[tuple[str, object]]) -> None:
    text = "".join(f"{k}={_fmt(v)}\n" for k, v in pairs)
    path.write_text(text)


def _read_header(path: Path) -> dict[str, str]:
    if not path.exists():
        raise FormatError(f"header file not found: {path}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_pgm16(path: Path, image: np.ndarray, vmax: float) -> None:
    """16-bit binary PGM, normalized to vmax; an all-zero max gives all black.

    ``image`` is an (nx, ny) slice; raster rows follow the y index, columns
    the x index. Negative values clip to 0. Samples are big-endian per the
    PGM specification.
    """
    nx, ny = image.shape
    if vmax > 0:
        scaled = np.clip(image / vmax, 0.0, 1.0)
        pixels = np.round(scaled * 65535.0).astype(">u2")
    else:
        pixels = np.zeros((nx, ny), dtype=">u2")
    header = f"P5\n{nx} {ny}\n65535\n".encode("ascii")
    path.write_bytes(header + pixels.T.tobytes())


def _grid_pairs(grid: Grid) -> list[tuple[str, object]]:
    return [
        ("nx", grid.dims[0]), ("ny", grid.dims[1]), ("nz", grid.dims[2]),
        ("voxel_size", grid.voxel_size),
        ("origin_x", grid.origin[0]), ("origin_y", grid.origin[1]),
        ("origin_z", grid.origin[2]),
        ("dtype", "f32le"), ("order", "x-fastest"),
    ]


def write_volume(values: np.ndarray, grid: Grid, base: Path,
                 extras: dict[str, object] | None = None,
                 previews: bool = True) -> list[Path]:
    """Write header + raw + per-slice previews; returns the written paths."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != grid.dims:
        raise FormatError(
            f"volume shape {values.shape} does not match grid dims {grid.dims}")
    pairs = [("format", VOLUME_FORMAT)] + _grid_pairs(grid)
    for key, val in (extras or {}).items():
        pairs.append((key, val))
    hdr = base.with_suffix(".hdr")
    raw = base.with_suffix(".raw")
    _write_header(hdr, pairs)
    raw.write_bytes(values.ravel(order="F").astype("<f4").tobytes())
    written = [hdr, raw]
    if previews:
        vmax = float(values.max()) if values.size else 0.0
        for iz in range(grid.dims[2]):
            p = base.parent / f"{base.name}_z{iz:04d}.pgm"
            write_pgm16(p, values[:, :, iz], vmax)
            written.append(p)
    return written


def read_volume(base: Path) -> tuple[np.ndarray, Grid, dict[str, str]]:
    """Read a volume written by :func:`write_volume`.

    Returns float64 values (exact upcast of the stored f32 bits), the grid,
    and any extra header keys.
    """
    base = Path(base)
    hdr = _read_header(base.with_suffix(".hdr"))
    if hdr.get("format") != VOLUME_FORMAT:
        raise FormatError(f"unknown volume format {hdr.get('format')!r}")
    if hdr.get("dtype") != "f32le":
        raise FormatError(f"unknown dtype {hdr.get('dtype')!r}")
    if hdr.get("order") != "x-fastest":
        raise FormatError(f"unknown order {hdr.get('order')!r}")
    try:
        dims = (int(hdr["nx"]), int(hdr["ny"]), int(hdr["nz"]))
        voxel_size = float(hdr["voxel_size"])
        origin = (float(hdr["origin_x"]), float(hdr["origin_y"]),
                  float(hdr["origin_z"]))
    except KeyError as exc:
        raise FormatError(f"header missing key {exc}") from exc
    grid = Grid(dims, voxel_size, origin)
    blob = base.with_suffix(".raw").read_bytes()
    expected = grid.n_voxels * 4
    if len(blob) != expected:
        raise FormatError(
            f"raw file holds {len(blob)} bytes, expected {expected}")
    values = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    consumed = {"format", "nx", "ny", "nz", "voxel_size", "origin_x",
                "origin_y", "origin_z", "dtype", "order"}
    extras = {k: v for k, v in hdr.items() if k not in consumed}
    return values.reshape(dims, order="F"), grid, extras


def write_phantom(phantom: VoxelPhantom, base: Path) -> list[Path]:
    """Phantom = concentration volume + background and cylinder keys."""
    b = phantom.background
    extras = {
        "mu_a": b.mu_a, "mu_s_prime": b.mu_s_prime, "mu_x": b.mu_x,
        "support_radius": phantom.support_radius(),
    }
    return write_volume(phantom.concentration, phantom.grid, base, extras)


def read_phantom(base: Path) -> VoxelPhantom:
    values, grid, extras = read_volume(base)
    try:
        background = TissueProperties(mu_a=float(extras["mu_a"]),
                                      mu_s_prime=float(extras["mu_s_prime"]),
                                      mu_x=float(extras["mu_x"]))
        radius = float(extras["support_radius"])
    except KeyError as exc:
        raise FormatError(f"phantom header missing key {exc}") from exc
    # support_radius = max masked center distance + half voxel, and no voxel
    # center sits between that max and the build radius, so thresholding at
    # support_radius - h/2 (+tol) reproduces the original mask exactly.
    r_thresh = radius - grid.voxel_size / 2 + 1e-9
    cx = grid.axis_centers(0)
    cy = grid.axis_centers(1)
    in_disk = (cx[:, None] ** 2 + cy[None, :] ** 2) <= r_thresh ** 2
    mask = np.repeat(in_disk[:, :, None], grid.dims[2], axis=2)
    mask |= values > 0
    return VoxelPhantom(grid, background, values, mask)


def write_measurements(ms: MeasurementSet, base: Path,
                       count_scale: float, protocol_hash: str) -> list[Path]:
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    if np.any(ms.counts > _U32_MAX):
        raise CapacityError(
            f"counts up to {int(ms.counts.max())} exceed the u32 file range")
    pairs = [
        ("format", MEASUREMENTS_FORMAT),
        ("n_bins", ms.n_bins), ("n_detectors", ms.n_detectors),
        ("seed", ms.rng_seed), ("count_scale", count_scale),
        ("protocol_hash", protocol_hash),
        ("counts_dtype", "u32le"), ("means_dtype", "f32le"),
        ("ct_dtype", "f32le"),
    ]
    hdr = base.with_suffix(".hdr")
    _write_header(hdr, pairs)
    counts_p = base.parent / f"{base.name}_counts.raw"
    means_p = base.parent / f"{base.name}_means.raw"
    ct_p = base.parent / f"{base.name}_ct.raw"
    counts_p.write_bytes(ms.counts.astype("<u4").tobytes())
    means_p.write_bytes(ms.means.astype("<f4").tobytes())
    ct_p.write_bytes(ms.ct_projections.astype("<f4").tobytes())
    return [hdr, counts_p, means_p, ct_p]


def read_measurements(base: Path) -> tuple[MeasurementSet, dict[str, str]]:
    base = Path(base)
    hdr = _read_header(base.with_suffix(".hdr"))
    if hdr.get("format") != MEASUREMENTS_FORMAT:
        raise FormatError(f"unknown measurements format {hdr.get('format')!r}")
    for key, want in (("counts_dtype", "u32le"), ("means_dtype", "f32le"),
                      ("ct_dtype", "f32le")):
        if hdr.get(key) != want:
            raise FormatError(f"unknown {key} {hdr.get(key)!r}")
    try:
        n_bins = int(hdr["n_bins"])
        n_det = int(hdr["n_detectors"])
        seed = int(hdr["seed"])
    except KeyError as exc:
        raise FormatError(f"measurements header missing key {exc}") from exc
    n_rows = n_bins * n_det

    def load(name: str, dtype: str, count: int) -> np.ndarray:
        blob = (base.parent / f"{base.name}_{name}.raw").read_bytes()
        itemsize = np.dtype(dtype).itemsize
        if len(blob) != count * itemsize:
            raise FormatError(
                f"{name} raw file holds {len(blob)} bytes, expected "
                f"{count * itemsize}")
        return np.frombuffer(blob, dtype=dtype)

    counts = load("counts", "<u4", n_rows).astype(np.int64)
    means = load("means", "<f4", n_rows).astype(np.float64)
    ct = load("ct", "<f4", n_bins).astype(np.float64)
    ms = MeasurementSet(counts=counts, means=means, ct_projections=ct,
                        rng_seed=seed, n_bins=n_bins, n_detectors=n_det)
    return ms, hdr


def export_measurements_csv(ms: MeasurementSet, bins, base: Path) -> list[Path]:
    """Optional human-readable export: one XLCT row per (bin, detector)."""
    base = Path(base)
    xlct_p = base.parent / f"{base.name}_xlct.csv"
    ct_p = base.parent / f"{base.name}_ct.csv"
    with open(xlct_p, "w") as fh:
        fh.write("bin,slice,angle,lateral,theta,s_center,detector,count,mean\n")
        for m, b in enumerate(bins):
            si, ai, ki = b.index
            for d in range(ms.n_detectors):
                r = m * ms.n_detectors + d
                fh.write(f"{m},{si},{ai},{ki},{_fmt(b.theta)},{_fmt(b.center)},"
                         f"{d},{ms.counts[r]},{_fmt(float(ms.means[r]))}\n")
    with open(ct_p, "w") as fh:
        fh.write("bin,slice,angle,lateral,theta,s_center,p\n")
        for m, b in enumerate(bins):
            si, ai, ki = b.index
            fh.write(f"{m},{si},{ai},{ki},{_fmt(b.theta)},{_fmt(b.center)},"
                     f"{_fmt(float(ms.ct_projections[m]))}\n")
    return [xlct_p, ct_p]


def write_key_values(path: Path, values: dict[str, object]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={_fmt(v)}\n" for k, v in values.items()))
    return path


def write_csv(path: Path, header: list[str], rows: list[list[object]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path
