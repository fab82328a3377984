"""Phantom corpus, toy spheres and the five validation transforms.

All transforms are pure functions of ``(volume, parameter, seed)``. Spatial
parameters are in voxels of the volume they are applied to; the benchmark
builder rescales the published values (given for 256^3 brain and 512^3
abdomen scans) to the phantom resolution.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import kernels
from .volcore import (
    BinaryMask3D,
    DatasetManifest,
    ManifestEntry,
    Volume3D,
    read_volume,
    write_mask,
    write_volume,
)

log = logging.getLogger(__name__)

KINDS = ("elastic", "blur", "bias", "swap", "black_slice", "toy_sphere")
KIND_LABEL = {
    "elastic": "deform",
    "blur": "blur",
    "bias": "bias",
    "swap": "swap",
    "black_slice": "black_slice",
    "toy_sphere": "toy",
}
# Values per region as (low severity, high severity).
TABLE1 = {
    "brain": {
        "elastic": (30, 40),
        "blur": (2, 4),
        "bias": (1, 2),
        "swap": (30, 80),
        "black_slice": (1, 5),
    },
    "abdomen": {
        "elastic": (50, 80),
        "blur": (3, 5),
        "bias": (1, 2),
        "swap": (50, 100),
        "black_slice": (1, 7),
    },
}
NATIVE_DIM = {"brain": 256, "abdomen": 512}
# parameters measured in voxels get rescaled with resolution
SPATIAL_KINDS = ("elastic", "blur", "swap")
DEFAULT_TOY_INTENSITY = 0.24


class SphereOutside(ValueError):
    pass


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    parameter: float
    seed: int = 0
    aux: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")


@dataclass(frozen=True)
class OodSample:
    image: Volume3D
    truth_mask: BinaryMask3D
    spec: TransformSpec


def _changed(a, b, tol=1e-6):
    return np.abs(a.astype(np.float64) - b.astype(np.float64)) > tol


def _identity(v, spec):
    return OodSample(v, BinaryMask3D.empty(v.shape, v.spacing), spec)


def foreground_bbox(data):
    """Inclusive (lo, hi) index bounds of nonzero voxels per array axis."""
    nz = np.nonzero(data)
    if nz[0].size == 0:
        raise ValueError("volume has no foreground")
    return [(int(ix.min()), int(ix.max())) for ix in nz]


def _centered_coords(shape):
    return [((np.arange(n) + 0.5) / n * 2.0 - 1.0) for n in shape]


# ------------------------------------------------------------------ phantom


def _smoothstep(a, b, x):
    t = np.clip((x - a) / (b - a), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def generate_phantom(seed: int, dims=64) -> Volume3D:
    """Brain-like ellipsoidal phantom, deterministic in ``seed``.

    The body is an ellipsoid whose intensity combines a radial profile, a
    bright rim, two dark ventricle-like blobs, concentric fold texture
    reaching into the core and a faint band-limited random texture. Background is
    exactly 0 and the foreground is rescaled into [0.06, 0.95].
    """
    if isinstance(dims, (int, np.integer)):
        dims = (dims, dims, dims)
    nx, ny, nz = dims
    if min(dims) < 16:
        raise ValueError(f"phantom dims must be at least 16^3, got {dims}")
    rng = np.random.default_rng(seed)
    zc, yc, xc = _centered_coords((nz, ny, nx))
    z, y, x = np.meshgrid(zc, yc, xc, indexing="ij")

    centre = rng.uniform(-0.03, 0.03, size=3)
    axes = np.array([0.58, 0.66, 0.62]) * rng.uniform(0.95, 1.05, size=3)
    dz, dy, dx = (z - centre[0]) / axes[0], (y - centre[1]) / axes[1], (x - centre[2]) / axes[2]
    r = np.sqrt(dz * dz + dy * dy + dx * dx)
    body = r <= 1.0

    img = 0.45 + 0.12 * (1.0 - r * r) * rng.uniform(0.9, 1.1)
    img += 0.18 * _smoothstep(0.72, 0.82, r) * rng.uniform(0.9, 1.1)

    off = rng.uniform(-0.04, 0.04, size=2)
    for side in (-1.0, 1.0):
        vz, vy, vx = 0.05 + off[0], 0.10 * side + off[1], 0.0
        d2 = ((dz - vz) / 0.22) ** 2 + ((dy - vy) / 0.09) ** 2 + ((dx - vx) / 0.35) ** 2
        img -= 0.22 * np.exp(-2.0 * d2)

    theta = np.arctan2(dy, dx)
    phase = rng.uniform(-0.15, 0.15)
    wavelength = 0.16 * rng.uniform(0.97, 1.03)
    folds = np.sin(2.0 * np.pi * (r / wavelength + 0.35 * np.cos(5.0 * theta + 0.5 * dz)) + phase)
    img += 0.10 * folds * _smoothstep(0.0, 0.2, r) * (1.0 - _smoothstep(0.9, 1.0, r))

    noise = ndimage.gaussian_filter(rng.standard_normal((nz, ny, nx)), 1.5)
    noise /= noise.std()
    img += 0.008 * noise

    fg = img[body]
    lo, hi = fg.min(), fg.max()
    out = np.zeros((nz, ny, nx))
    out[body] = 0.06 + (fg - lo) / (hi - lo) * (0.95 - 0.06)
    return Volume3D(out)


# ------------------------------------------------------------------ toy sphere


def ball_mask(shape, center, radius):
    """Digital ball ``|p - center|^2 <= radius^2`` in array index order."""
    if radius <= 0:
        return np.zeros(shape, dtype=bool)
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return d2 <= radius * radius


def insert_toy_sphere(v: Volume3D, center, radius, intensity=DEFAULT_TOY_INTENSITY) -> OodSample:
    """Paint a homogeneous ball of ``intensity`` at ``center`` = (z, y, x)."""
    spec = TransformSpec("toy_sphere", float(radius), 0, float(intensity))
    if not 0.0 < intensity <= 1.0:
        raise ValueError("sphere intensity must lie in (0, 1]")
    if radius <= 0:
        return _identity(v, spec)
    box = foreground_bbox(v.data)
    for c, (lo, hi) in zip(center, box):
        if c - radius < lo or c + radius > hi:
            raise SphereOutside(f"sphere at {tuple(center)} r={radius} leaves the foreground box {box}")
    ball = ball_mask(v.shape, center, radius)
    data = np.array(v.data)
    data[ball] = intensity
    return OodSample(v.with_data(data), BinaryMask3D(ball, v.spacing), spec)


# ------------------------------------------------------------------ elastic


def _corner_aligned_matrix(n_ctrl, n):
    """(n, n_ctrl) linear interpolation weights, control points at the ends."""
    pos = np.linspace(0.0, n_ctrl - 1, n)
    i0 = np.minimum(np.floor(pos).astype(int), n_ctrl - 2)
    f = pos - i0
    m = np.zeros((n, n_ctrl))
    m[np.arange(n), i0] = 1.0 - f
    m[np.arange(n), i0 + 1] += f
    return m


def displacement_field(shape, max_displacement, seed, n_ctrl=7):
    """Dense (3, nz, ny, nx) displacement from a random n_ctrl^3 control grid.

    Components are uniform in [-d, d]; the outer control layer is pinned to
    zero so the volume border stays fixed.
    """
    rng = np.random.default_rng(seed)
    ctrl = rng.uniform(-max_displacement, max_displacement, size=(3, n_ctrl, n_ctrl, n_ctrl))
    ctrl[:, [0, -1], :, :] = 0.0
    ctrl[:, :, [0, -1], :] = 0.0
    ctrl[:, :, :, [0, -1]] = 0.0
    mz, my, mx = (_corner_aligned_matrix(n_ctrl, n) for n in shape)
    return np.einsum("za,yb,xc,dabc->dzyx", mz, my, mx, ctrl, optimize=True)


def apply_elastic(v: Volume3D, max_displacement, seed) -> OodSample:
    spec = TransformSpec("elastic", float(max_displacement), int(seed))
    if max_displacement < 0:
        raise ValueError("max_displacement must be >= 0")
    if max_displacement == 0:
        return _identity(v, spec)
    disp = displacement_field(v.shape, max_displacement, seed)
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in v.shape), indexing="ij")
    warped = kernels.trilinear_sample(v.data, grid[0] + disp[0], grid[1] + disp[1], grid[2] + disp[2], 0.0)
    warped = np.clip(warped.reshape(v.shape), 0.0, 1.0)
    out = v.with_data(warped)
    return OodSample(out, BinaryMask3D(_changed(out.data, v.data), v.spacing), spec)


# ------------------------------------------------------------------ blur


def apply_blur(v: Volume3D, std, seed=0) -> OodSample:
    spec = TransformSpec("blur", float(std), int(seed))
    if std < 0:
        raise ValueError("blur std must be >= 0")
    if std < 0.25:
        return _identity(v, spec)
    blurred = ndimage.gaussian_filter(v.data.astype(np.float64), sigma=std, mode="nearest", truncate=4.0)
    out = v.with_data(blurred)
    return OodSample(out, BinaryMask3D(_changed(out.data, v.data), v.spacing), spec)


# ------------------------------------------------------------------ bias field


def bias_field(shape, coefficient, seed, order=3):
    """exp(P) with P a full polynomial of total degree ``order`` on [-1, 1]^3."""
    rng = np.random.default_rng(seed)
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    z, y, x = np.meshgrid(*axes, indexing="ij")
    poly = np.zeros(shape)
    for i in range(order + 1):
        for j in range(order + 1 - i):
            for k in range(order + 1 - i - j):
                c = rng.uniform(-coefficient, coefficient)
                poly += c * (z ** i) * (y ** j) * (x ** k)
    return np.exp(poly)


def apply_bias_field(v: Volume3D, coefficients, seed) -> OodSample:
    spec = TransformSpec("bias", float(coefficients), int(seed))
    if coefficients < 0:
        raise ValueError("bias coefficient bound must be >= 0")
    if coefficients == 0:
        return _identity(v, spec)
    field = bias_field(v.shape, coefficients, seed)
    out = v.with_data(np.clip(v.data.astype(np.float64) * field, 0.0, 1.0))
    return OodSample(out, BinaryMask3D(_changed(out.data, v.data), v.spacing), spec)


# ------------------------------------------------------------------ swap


def _swap_origins(data, box, p, rng, attempts=1000):
    # patches must be disjoint and differ in content, otherwise the swap is a no-op
    for _ in range(attempts):
        a = [int(rng.integers(lo, hi - p + 2)) for lo, hi in box]
        b = [int(rng.integers(lo, hi - p + 2)) for lo, hi in box]
        if not any(abs(ai - bi) >= p for ai, bi in zip(a, b)):
            continue
        sa = tuple(slice(o, o + p) for o in a)
        sb = tuple(slice(o, o + p) for o in b)
        if not np.array_equal(data[sa], data[sb]):
            return sa, sb
    raise ValueError(f"could not place two distinct disjoint {p}^3 patches in {box}")


def apply_swap(v: Volume3D, patch_size, seed) -> OodSample:
    """Exchange two disjoint cubic patches inside the foreground box."""
    spec = TransformSpec("swap", float(patch_size), int(seed))
    p = int(round(patch_size))
    box = foreground_bbox(v.data)
    if p <= 0:
        return _identity(v, spec)
    if any(hi - lo + 1 < p for lo, hi in box):
        raise ValueError(f"patch size {p} exceeds the foreground box {box}")
    rng = np.random.default_rng(seed)
    sa, sb = _swap_origins(v.data, box, p, rng)
    data = np.array(v.data)
    data[sa], data[sb] = v.data[sb], v.data[sa]
    region = np.zeros(v.shape, dtype=bool)
    region[sa] = True
    region[sb] = True
    truth = region & (data != v.data)
    return OodSample(v.with_data(data), BinaryMask3D(truth, v.spacing), spec)


# ------------------------------------------------------------------ black slice


def apply_black_slice(v: Volume3D, slice_thickness, seed) -> OodSample:
    spec = TransformSpec("black_slice", float(slice_thickness), int(seed))
    t = int(round(slice_thickness))
    if t <= 0:
        return _identity(v, spec)
    rng = np.random.default_rng(seed)
    axis = int(rng.integers(0, 3))
    n = v.shape[axis]
    if t >= n:
        raise ValueError(f"slice thickness {t} >= axis length {n}")
    lo, hi = foreground_bbox(v.data)[axis]
    start = int(rng.integers(lo, max(lo, hi - t + 1) + 1))
    start = min(start, n - t)
    slab = [slice(None)] * 3
    slab[axis] = slice(start, start + t)
    slab = tuple(slab)
    data = np.array(v.data)
    data[slab] = 0.0
    truth = np.zeros(v.shape, dtype=bool)
    truth[slab] = v.data[slab] != 0
    return OodSample(v.with_data(data), BinaryMask3D(truth, v.spacing), spec)


TRANSFORMS = {
    "elastic": apply_elastic,
    "blur": apply_blur,
    "bias": apply_bias_field,
    "swap": apply_swap,
    "black_slice": apply_black_slice,
}


def apply_transform(v: Volume3D, spec: TransformSpec) -> OodSample:
    if spec.kind == "toy_sphere":
        raise ValueError("toy spheres need a centre; use insert_toy_sphere")
    return TRANSFORMS[spec.kind](v, spec.parameter, spec.seed)


# ------------------------------------------------------------------ corpus


def derive_seed(*key) -> int:
    """Stable 31-bit seed for an integer key tuple."""
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0] & 0x7FFFFFFF)


def effective_parameter(kind, nominal, region, dims):
    if kind in SPATIAL_KINDS:
        return float(nominal) * float(dims) / NATIVE_DIM[region]
    return float(nominal)


def generate_corpus(out_dir, count, dims=64, seed=0, val_fraction=0.1, suffix=".rvol") -> DatasetManifest:
    """Write ``count`` phantoms and a manifest with a random 90/10 train/val split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(derive_seed(seed, 0xC0))
    n_val = int(round(count * val_fraction))
    val = set(rng.permutation(count)[:n_val].tolist())
    entries = []
    for i in range(count):
        s = derive_seed(seed, i)
        name = f"phantom_{i:04d}{suffix}"
        write_volume(generate_phantom(s, dims), out / name)
        entries.append(ManifestEntry(name, "val" if i in val else "train", "in_distribution", "none", s))
    manifest = DatasetManifest(entries, root=str(out))
    manifest.save(out / "manifest.json")
    return manifest


def benchmark_cells(region="brain"):
    """(kind, severity, nominal value) for the ten transform/severity cells."""
    cells = []
    for kind, (low, high) in TABLE1[region].items():
        cells.append((kind, "low", low))
        cells.append((kind, "high", high))
    return cells


def build_benchmark(n_id, n_per_cell, out_dir, seed, region="brain", dims=64,
                    sources: Optional[Sequence[Volume3D]] = None, workers=1,
                    suffix=".rvol") -> DatasetManifest:
    """Write an OOD validation set: ``n_id`` clean cases plus ``n_per_cell``
    transformed cases for every (transform, severity) cell.

    Without ``sources`` the clean cases are fresh phantoms; transformed cases
    cycle over the clean pool, so each source is reused like the published
    protocol reuses its validation scans.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if sources is None:
        pool = [generate_phantom(derive_seed(seed, 0x1D, i), dims) for i in range(max(n_id, 1))]
    else:
        pool = list(sources)
        if not pool:
            raise ValueError("empty source pool")
        dims = pool[0].dims[0]

    jobs = []
    for i in range(n_id):
        jobs.append(("id", i, None, None, None))
    k = 0
    for kind, severity, nominal in benchmark_cells(region):
        for j in range(n_per_cell):
            jobs.append((kind, k, severity, nominal, j))
            k += 1

    def run(job):
        kind, idx, severity, nominal, j = job
        src = pool[idx % len(pool)]
        if kind == "id":
            name = f"id_{idx:03d}{suffix}"
            write_volume(src, out / name)
            return ManifestEntry(name, "val", "in_distribution", "none", idx)
        s = derive_seed(seed, 0x0D, idx)
        value = effective_parameter(kind, nominal, region, dims)
        sample = TRANSFORMS[kind](src, value, s)
        stem = f"{KIND_LABEL[kind]}_{severity}_{j:03d}"
        write_volume(sample.image, out / f"{stem}{suffix}")
        write_mask(sample.truth_mask, out / f"{stem}_mask{suffix}")
        return ManifestEntry(f"{stem}{suffix}", "val", KIND_LABEL[kind], severity, s,
                             mask=f"{stem}_mask{suffix}",
                             params={"kind": kind, "nominal": nominal, "effective": value,
                                     "source": idx % len(pool)})

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            entries = list(ex.map(run, jobs))
    else:
        entries = [run(job) for job in jobs]
    manifest = DatasetManifest(entries, root=str(out))
    manifest.save(out / "manifest.json")
    log.info("benchmark: %d entries in %s", len(entries), out)
    return manifest


def load_sources(manifest: DatasetManifest, split="val"):
    return [read_volume(manifest.resolve(e.path)) for e in manifest.select(split=split)]
