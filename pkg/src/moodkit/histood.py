"""Histogram detector for homogeneous (constant-intensity) anomalies.

A homogeneous blob piles its voxels into one histogram bin, far above what
the training histograms show for that bin. The detector flags the bin with
the largest excess over ``mean + k * std`` and turns it into a voxel mask.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import BadMagic, BinningMismatch, InvalidVolume, TruncatedPayload
from .volcore import BinaryMask3D, DatasetManifest, Volume3D, normalize, read_volume, resample_trilinear

N_BINS = 4096
HREF_MAGIC = b"HREF0001"
REGION_TAGS = {"brain": 0, "abdomen": 1, "unknown": 255}
K_SIGMA = {"brain": 64.0, "abdomen": 128.0}


@dataclass
class HistogramReference:
    bin_mean: np.ndarray
    bin_std: np.ndarray
    region: str = "unknown"
    n_volumes: int = 0

    @property
    def n_bins(self) -> int:
        return int(self.bin_mean.size)

    def save(self, path) -> None:
        head = HREF_MAGIC + struct.pack("<I", self.n_bins)
        body = (np.asarray(self.bin_mean, "<f8").tobytes() + np.asarray(self.bin_std, "<f8").tobytes()
                + struct.pack("<B", REGION_TAGS.get(self.region, 255)))
        Path(path).write_bytes(head + body)

    @classmethod
    def load(cls, path) -> "HistogramReference":
        raw = Path(path).read_bytes()
        if raw[:8] != HREF_MAGIC:
            raise BadMagic(f"{path}: not a histogram reference")
        (n,) = struct.unpack_from("<I", raw, 8)
        need = 12 + 16 * n + 1
        if len(raw) < need:
            raise TruncatedPayload(f"{path}: expected {need} bytes, found {len(raw)}")
        mean = np.frombuffer(raw, "<f8", n, 12).copy()
        std = np.frombuffer(raw, "<f8", n, 12 + 8 * n).copy()
        tag = raw[12 + 16 * n]
        region = {v: k for k, v in REGION_TAGS.items()}.get(tag, "unknown")
        return cls(mean, std, region)


@dataclass
class HistDetectorConfig:
    k_sigma: float = 64.0
    zero_bin_discard: bool = True
    morph_size: int = 6
    min_peak_excess: float = 50.0
    n_bins: int = N_BINS

    def __post_init__(self):
        if self.k_sigma <= 0:
            raise ValueError("k_sigma must be positive")
        if self.morph_size < 1:
            raise ValueError("morph_size must be >= 1")

    @classmethod
    def for_region(cls, region: str, **overrides) -> "HistDetectorConfig":
        return cls(k_sigma=K_SIGMA[region], **overrides)


@dataclass
class HistDetection:
    detected: bool
    peak_found: bool = False
    peak_bin: Optional[int] = None
    peak_intensity: Optional[float] = None
    peak_excess: float = 0.0
    mask: Optional[BinaryMask3D] = None


def compute_histogram(v: Volume3D, n_bins: int = N_BINS) -> np.ndarray:
    """Voxel counts with bin index ``min(floor(x * n_bins), n_bins - 1)``."""
    d = v.data
    if d.min() < 0.0 or d.max() > 1.0:
        raise InvalidVolume("histogram input must be normalised to [0, 1]")
    return kernels.bin_counts(d, n_bins)


def _iter_volumes(source, split):
    if isinstance(source, DatasetManifest):
        for e in source.select(split=split):
            yield read_volume(source.resolve(e.path))
    else:
        yield from source


def build_reference(source: Union[DatasetManifest, Iterable[Volume3D]], region="unknown",
                    working_dims=None, n_bins=N_BINS, split="train") -> HistogramReference:
    """Per-bin mean and population std of training histograms.

    Each volume is resampled to ``working_dims`` (when given) and min-max
    normalised first, exactly as the detector treats test inputs.
    """
    rows = []
    for v in _iter_volumes(source, split):
        if working_dims is not None and tuple(v.dims) != tuple(_dims3(working_dims)):
            v = resample_trilinear(v, working_dims)
        rows.append(compute_histogram(normalize(v), n_bins))
    if not rows:
        raise ValueError("no training volumes for the histogram reference")
    counts = np.stack(rows).astype(np.float64)
    return HistogramReference(counts.mean(axis=0), counts.std(axis=0), region, len(rows))


def _dims3(d):
    return (d, d, d) if isinstance(d, (int, np.integer)) else tuple(d)


def excess_counts(hist, ref: HistogramReference, cfg: HistDetectorConfig) -> np.ndarray:
    ex = hist - (ref.bin_mean + cfg.k_sigma * ref.bin_std)
    ex = np.maximum(ex, 0.0)
    if cfg.zero_bin_discard:
        ex[0] = 0.0
    return ex


def detect(v: Volume3D, ref: HistogramReference, cfg: HistDetectorConfig) -> HistDetection:
    """Look for a bin whose count exceeds the training envelope.

    ``peak_found`` reflects the histogram test alone; ``detected`` also
    requires the cleaned-up mask to keep at least one voxel.
    """
    if ref.bin_std.size != ref.n_bins:
        raise BinningMismatch("reference mean/std lengths differ")
    if ref.n_bins != cfg.n_bins:
        raise BinningMismatch(f"detector uses {cfg.n_bins} bins, reference has {ref.n_bins}")
    hist = compute_histogram(v, cfg.n_bins)
    ex = excess_counts(hist, ref, cfg)
    peak = int(np.argmax(ex))  # first maximum, i.e. lowest index on ties
    if ex[peak] <= cfg.min_peak_excess:
        return HistDetection(False)
    mask = make_mask(v, peak, cfg, cfg.n_bins)
    return HistDetection(mask.any(), True, peak, (peak + 0.5) / cfg.n_bins, float(ex[peak]), mask)


def make_mask(v: Volume3D, peak_bin: int, cfg: HistDetectorConfig, n_bins: int = N_BINS) -> BinaryMask3D:
    """Voxels falling in ``peak_bin``, opened by a cube of edge ``morph_size``."""
    if not 0 <= peak_bin < n_bins:
        raise ValueError(f"peak bin {peak_bin} outside [0, {n_bins})")
    bins = np.minimum(np.floor(v.data.astype(np.float64) * n_bins), n_bins - 1)
    sel = bins == peak_bin
    cube = np.ones((cfg.morph_size,) * 3, dtype=bool)
    opened = ndimage.binary_dilation(ndimage.binary_erosion(sel, cube), cube)
    return BinaryMask3D(opened, v.spacing)
