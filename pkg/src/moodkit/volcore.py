"""Volume data model, normalisation, resampling and file I/O.

Arrays are stored C-ordered with shape ``(nz, ny, nx)`` so that x is the
fastest-varying index; ``dims`` always reports ``(nx, ny, nz)``.
"""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import BadMagic, FormatError, InvalidVolume, TruncatedPayload, UnsupportedDtype

RVOL_MAGIC = b"RVOL0001"
_RVOL_HEAD = struct.Struct("<8s3I3fB")
_RVOL_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}

NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_NIFTI_BITPIX = {2: 8, 4: 16, 16: 32}


def _freeze(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Volume3D:
    """Scalar volume; ``data`` has shape (nz, ny, nx) and dtype float32."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        a = np.array(self.data, dtype=np.float32, copy=True)
        if a.ndim != 3 or a.size == 0:
            raise InvalidVolume(f"expected a non-empty 3D array, got shape {a.shape}")
        object.__setattr__(self, "data", _freeze(a))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data) -> "Volume3D":
        return Volume3D(data, self.spacing)


@dataclass(frozen=True)
class BinaryMask3D:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        a = np.array(self.data, dtype=bool, copy=True)
        if a.ndim != 3:
            raise InvalidVolume(f"expected a 3D mask, got shape {a.shape}")
        object.__setattr__(self, "data", _freeze(a))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def shape(self):
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum())

    def any(self) -> bool:
        return bool(self.data.any())

    @classmethod
    def empty(cls, shape, spacing=(1.0, 1.0, 1.0)) -> "BinaryMask3D":
        return cls(np.zeros(shape, dtype=bool), spacing)


def _as_shape(dims) -> tuple:
    """(nx, ny, nz) -> array shape (nz, ny, nx)."""
    if isinstance(dims, (int, np.integer)):
        dims = (dims, dims, dims)
    nx, ny, nz = (int(d) for d in dims)
    if min(nx, ny, nz) <= 0:
        raise ValueError(f"dims must be positive, got {dims}")
    return (nz, ny, nx)


# ------------------------------------------------------------------ intensity


def normalize(v: Volume3D) -> Volume3D:
    """Min-max rescale to [0, 1]; a constant volume becomes all zeros."""
    a = v.data.astype(np.float64)
    if a.size == 0:
        raise InvalidVolume("empty volume")
    lo, hi = a.min(), a.max()
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise InvalidVolume("volume contains non-finite values")
    if hi == lo:
        return v.with_data(np.zeros_like(a))
    return v.with_data((a - lo) / (hi - lo))


# ------------------------------------------------------------------ resampling


def _linear_axis(n_in, n_out):
    c = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    c = np.clip(c, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(c).astype(np.int64), max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = c - i0
    return i0, i1, f


def _interp_along(a, axis, n_out):
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    i0, i1, f = _linear_axis(n_in, n_out)
    shape = [1] * a.ndim
    shape[axis] = n_out
    f = f.reshape(shape).astype(a.dtype)
    return np.take(a, i0, axis=axis) * (1 - f) + np.take(a, i1, axis=axis) * f


def resample_trilinear(v: Volume3D, target_dims) -> Volume3D:
    """Trilinear resize with cell-centre alignment.

    Output voxel i on an axis samples input coordinate
    ``(i + 0.5) * n_in / n_out - 0.5`` (clamped to the input extent), so
    outputs stay within the input's value range.
    """
    shape = _as_shape(target_dims)
    a = v.data.astype(np.float64)
    for axis in range(3):
        a = _interp_along(a, axis, shape[axis])
    scale = [vs * n_in / n_out for vs, n_in, n_out in zip(v.spacing, v.dims, shape[::-1])]
    return Volume3D(a, tuple(scale))


def _nearest_axis(n_in, n_out):
    src = np.floor((np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.clip(src, 0, n_in - 1)


def resample_mask_nearest(m: BinaryMask3D, target_dims) -> BinaryMask3D:
    shape = _as_shape(target_dims)
    iz, iy, ix = (_nearest_axis(n_in, n_out) for n_in, n_out in zip(m.shape, shape))
    scale = [ms * n_in / n_out for ms, n_in, n_out in zip(m.spacing, m.dims, shape[::-1])]
    return BinaryMask3D(m.data[np.ix_(iz, iy, ix)], tuple(scale))


# ------------------------------------------------------------------ RVOL


def _write_rvol(path, array, spacing, code):
    nz, ny, nx = array.shape
    head = _RVOL_HEAD.pack(RVOL_MAGIC, nx, ny, nz, *spacing, code)
    payload = np.ascontiguousarray(array, dtype=_RVOL_DTYPES[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(payload)


def _read_rvol(raw: bytes):
    if len(raw) < _RVOL_HEAD.size:
        if raw[:8] != RVOL_MAGIC[: len(raw[:8])]:
            raise BadMagic("not an RVOL file")
        raise TruncatedPayload("RVOL header truncated")
    magic, nx, ny, nz, sx, sy, sz, code = _RVOL_HEAD.unpack_from(raw)
    if magic != RVOL_MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if code not in _RVOL_DTYPES:
        raise UnsupportedDtype(f"RVOL dtype code {code}")
    dt = _RVOL_DTYPES[code]
    n = nx * ny * nz
    body = raw[_RVOL_HEAD.size:]
    if len(body) < n * dt.itemsize:
        raise TruncatedPayload(f"expected {n * dt.itemsize} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=dt, count=n).reshape(nz, ny, nx)
    return arr, (sx, sy, sz), code


# ------------------------------------------------------------------ NIfTI-1


def _is_nifti(path) -> bool:
    name = str(path).lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def write_nifti(path, array, spacing=(1.0, 1.0, 1.0), datatype=16, slope=1.0, inter=0.0):
    """Write a single-file NIfTI-1 image (gzip if the name ends in .gz).

    ``array`` has shape (nz, ny, nx) and is stored raw in ``datatype``;
    readers recover intensities as ``slope * raw + inter``.
    """
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDtype(f"NIfTI datatype {datatype}")
    nz, ny, nx = array.shape
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, _NIFTI_BITPIX[datatype])
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<fff", hdr, 108, 352.0, slope, inter)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    hdr[344:348] = b"n+1\x00"
    data = bytes(hdr) + b"\x00" * 4 + np.ascontiguousarray(array, dtype=NIFTI_DTYPES[datatype]).tobytes()
    opener = gzip.open if str(path).lower().endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(data)


def _read_nifti(raw: bytes):
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 348:
        raise TruncatedPayload("NIfTI header truncated")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        if struct.unpack_from(">i", raw, 0)[0] == 348:
            raise FormatError("big-endian NIfTI is not supported")
        raise BadMagic("sizeof_hdr is not 348")
    if raw[344:348] != b"n+1\x00":
        raise BadMagic(f"bad NIfTI magic {raw[344:348]!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    datatype, _ = struct.unpack_from("<hh", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from("<fff", raw, 108)
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDtype(f"NIfTI datatype {datatype}")
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4:ndim + 1]):
        raise FormatError(f"only 3D NIfTI images are supported (dim={dim})")
    nx, ny, nz = dim[1:4]
    dt = NIFTI_DTYPES[datatype]
    off = int(vox_offset)
    n = nx * ny * nz
    if len(raw) < off + n * dt.itemsize:
        raise TruncatedPayload("NIfTI payload truncated")
    arr = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(nz, ny, nx)
    if slope == 0:
        slope = 1.0
    spacing = tuple(abs(p) if p else 1.0 for p in pixdim[1:4])
    return arr, spacing, slope, inter, datatype


def _read_raw(path):
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FormatError(str(exc)) from exc


# ------------------------------------------------------------------ public I/O


def read_volume(path) -> Volume3D:
    """Read an RVOL or NIfTI-1 file; the format is sniffed from the content."""
    raw = _read_raw(path)
    if raw[:8] == RVOL_MAGIC or (not _is_nifti(path) and raw[:2] != b"\x1f\x8b"):
        arr, spacing, _ = _read_rvol(raw)
        return Volume3D(arr.astype(np.float32), spacing)
    arr, spacing, slope, inter, datatype = _read_nifti(raw)
    if slope == 1.0 and inter == 0.0:
        data = arr.astype(np.float32)
    else:
        data = (slope * arr.astype(np.float64) + inter).astype(np.float32)
    return Volume3D(data, spacing)


def write_volume(v: Volume3D, path) -> None:
    if _is_nifti(path):
        write_nifti(path, v.data, v.spacing, datatype=16)
    else:
        _write_rvol(path, v.data, v.spacing, 0)


def read_mask(path) -> BinaryMask3D:
    v = read_volume(path)
    return BinaryMask3D(v.data > 0.5, v.spacing)


def write_mask(m: BinaryMask3D, path) -> None:
    data = m.data.astype(np.uint8)
    if _is_nifti(path):
        write_nifti(path, data, m.spacing, datatype=2)
    else:
        _write_rvol(path, data, m.spacing, 1)


# ------------------------------------------------------------------ manifest

SPLITS = ("train", "val")
LABELS = ("in_distribution", "toy", "deform", "blur", "bias", "swap", "black_slice")
SEVERITIES = ("low", "high", "none")
SAMPLE_ONLY = "sample_only"


@dataclass
class ManifestEntry:
    path: str
    split: str = "train"
    label: str = "in_distribution"
    severity: str = "none"
    seed: int = 0
    mask: Optional[str] = None
    params: dict = field(default_factory=dict)

    @property
    def is_ood(self) -> bool:
        return self.label != "in_distribution"


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise ValueError(f"duplicate manifest path {e.path}")
            seen.add(e.path)
            if e.split not in SPLITS:
                raise ValueError(f"bad split {e.split!r}")
            if e.label not in LABELS:
                raise ValueError(f"bad label {e.label!r}")
            if e.severity not in SEVERITIES:
                raise ValueError(f"bad severity {e.severity!r}")
            if e.is_ood and not e.mask:
                raise ValueError(f"OOD entry {e.path} needs a mask path or {SAMPLE_ONLY!r}")

    def resolve(self, rel) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.root is None:
            return p
        return Path(self.root) / p

    def select(self, split=None, label=None) -> list:
        return [e for e in self.entries
                if (split is None or e.split == split) and (label is None or e.label == label)]

    def to_json(self) -> str:
        rows = []
        for e in self.entries:
            row = asdict(e)
            if not row["params"]:
                row.pop("params")
            rows.append(row)
        return json.dumps({"entries": rows}, indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest {path}: {exc}") from exc
        entries = [ManifestEntry(**row) for row in doc.get("entries", [])]
        return cls(entries, root=str(path.parent))
