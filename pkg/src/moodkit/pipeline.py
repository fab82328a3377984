"""Two-branch OOD prediction (histogram first, diffusion second) and evaluation."""
from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import diffusion, histood, postproc
from .denoiser import load_checkpoint
from .errors import MoodkitError
from .histood import HistDetectorConfig, HistogramReference
from .postproc import PostprocConfig, PredictionResult
from .synthdata import derive_seed
from .volcore import (BinaryMask3D, DatasetManifest, Volume3D, normalize, read_mask, read_volume,
                      resample_trilinear)

log = logging.getLogger(__name__)

WORKING_DIMS = {
    "desk": {"brain": 64, "abdomen": 64},
    "paper": {"brain": 256, "abdomen": 256},
}
# The small desk denoiser cannot rebuild a slice from step 200 (see notes);
# it keeps SSIM contrast only for short chains.
T_START = {"desk": 10, "paper": 200}


@dataclass
class PipelineConfig:
    region: str = "brain"
    working_dims: int = 64
    hist: HistDetectorConfig = field(default_factory=HistDetectorConfig)
    post: PostprocConfig = field(default_factory=PostprocConfig)
    scheduler: diffusion.SchedulerConfig = field(default_factory=diffusion.SchedulerConfig)
    noise: Optional[diffusion.SimplexNoiseConfig] = None  # None: take it from the checkpoint
    t_start: int = 200
    checkpoint: Optional[str] = None
    reference: Optional[str] = None
    seed: int = 0
    workers: int = 1
    recon_margin: int = 8
    recon_chunk: int = 2

    def __post_init__(self):
        if self.region not in ("brain", "abdomen"):
            raise ValueError(f"unknown region {self.region!r}")
        if not 0 < self.t_start < self.scheduler.T:
            raise ValueError(f"t_start must lie in (0, {self.scheduler.T})")
        if self.workers < 1 or self.recon_chunk < 1:
            raise ValueError("workers and recon_chunk must be >= 1")

    @classmethod
    def preset(cls, region="brain", scale="desk", **kw) -> "PipelineConfig":
        kw.setdefault("hist", HistDetectorConfig.for_region(region))
        if kw.get("t_start") is None:
            kw["t_start"] = T_START[scale]
        return cls(region=region, working_dims=WORKING_DIMS[scale][region], **kw)


# ------------------------------------------------------------------ helpers


def to_working(v: Volume3D, dims) -> Volume3D:
    """Resize (if needed) and min-max normalise, as both branches expect."""
    target = (dims,) * 3 if np.isscalar(dims) else tuple(dims)
    if tuple(v.dims) != target:
        v = resample_trilinear(v, target)
    return normalize(v)


def body_slices(body: BinaryMask3D) -> np.ndarray:
    return np.flatnonzero(body.data.any(axis=(1, 2)))


def collect_training_slices(manifest: DatasetManifest, working_dims=64, split="train",
                            post: PostprocConfig = PostprocConfig()) -> np.ndarray:
    """Axial slices that intersect the body, from every volume in ``split``."""
    out = []
    for e in manifest.select(split=split):
        v = to_working(read_volume(manifest.resolve(e.path)), working_dims)
        body = postproc.body_mask(v, post)
        out.append(v.data[body_slices(body)])
    if not out:
        raise ValueError(f"manifest has no {split!r} volumes")
    return np.concatenate(out).astype(np.float32)


def _bbox2d(m):
    ys = np.flatnonzero(m.any(axis=1))
    xs = np.flatnonzero(m.any(axis=0))
    return ys[0], ys[-1], xs[0], xs[-1]


def reconstruct_volume(v: Volume3D, body: BinaryMask3D, model, table, noise_cfg, t_start, seed,
                       margin=8, chunk=2, workers=1) -> np.ndarray:
    """Reconstruct the body-bearing axial slices of ``v``.

    Slices are grouped in fixed runs of ``chunk``; each run is cropped in-plane
    to the body box plus ``margin``. Voxels never reconstructed keep the input.
    """
    data = v.data
    out = np.array(data, dtype=np.float32, copy=True)
    zs = body_slices(body)
    ny, nx = data.shape[1:]
    jobs = []
    for a in range(0, len(zs), chunk):
        z = zs[a:a + chunk]
        y0, y1, x0, x1 = _bbox2d(body.data[z].any(axis=0))
        y0, x0 = max(y0 - margin, 0), max(x0 - margin, 0)
        y1, x1 = min(y1 + margin + 1, ny), min(x1 + margin + 1, nx)
        jobs.append((z, y0, y1, x0, x1))

    def run(job):
        z, y0, y1, x0, x1 = job
        return diffusion.reconstruct(data[z, y0:y1, x0:x1], t_start, model, table, noise_cfg, seed,
                                     slice_ids=z, chunk=len(z), workers=1)

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    for (z, y0, y1, x0, x1), rec in zip(jobs, parts):
        out[z, y0:y1, x0:x1] = rec
    return out


# ------------------------------------------------------------------ predictor


class Pipeline:
    """Loaded reference + denoiser, ready to score volumes."""

    def __init__(self, cfg: PipelineConfig, reference: HistogramReference = None, model=None,
                 noise_cfg: diffusion.SimplexNoiseConfig = None):
        self.cfg = cfg
        if reference is None:
            if cfg.reference is None:
                raise MoodkitError("no histogram reference given")
            reference = HistogramReference.load(cfg.reference)
        if model is None:
            if cfg.checkpoint is None:
                raise MoodkitError("no denoiser checkpoint given")
            tr = load_checkpoint(cfg.checkpoint, expect_scheduler=cfg.scheduler)
            model, noise_cfg = tr.model, noise_cfg or tr.noise_cfg
        self.reference = reference
        self.model = model
        self.noise_cfg = cfg.noise or noise_cfg or diffusion.SimplexNoiseConfig()
        self.table = diffusion.build_schedule(cfg.scheduler)

    def predict(self, volume: Volume3D, seed=None, workers=None) -> PredictionResult:
        cfg = self.cfg
        seed = cfg.seed if seed is None else seed
        workers = cfg.workers if workers is None else workers
        t0 = time.perf_counter()
        v = to_working(volume, cfg.working_dims)
        det = histood.detect(v, self.reference, cfg.hist)
        diag = {"hist_peak_found": det.peak_found, "hist_peak_bin": det.peak_bin,
                "hist_peak_excess": det.peak_excess}
        if det.detected:
            diag["seconds"] = time.perf_counter() - t0
            return postproc.finalize(det.mask, volume.dims, "histogram", diag)
        if det.peak_found:
            log.info("histogram peak at bin %d but opening left no voxels; using diffusion", det.peak_bin)

        body = postproc.body_mask(v, cfg.post)
        if not body.any():
            diag["body_empty"] = True
            diag["seconds"] = time.perf_counter() - t0
            return postproc.finalize(body, volume.dims, "none", diag)
        rec = reconstruct_volume(v, body, self.model, self.table, self.noise_cfg, cfg.t_start, seed,
                                 cfg.recon_margin, cfg.recon_chunk, workers)
        rec = v.with_data(rec * body.data)
        ssim = postproc.ssim_map(rec, v, cfg.post)
        smooth = postproc.smoothed_ssim(ssim, body, cfg.post, max(v.dims))
        mask = BinaryMask3D((smooth < cfg.post.ssim_threshold) & body.data, v.spacing)
        diag.update(ssim_body_mean=float(ssim[body.data].mean()),
                    ssim_smooth_min=float(smooth[body.data].min()),
                    seconds=time.perf_counter() - t0)
        return postproc.finalize(mask, volume.dims, "diffusion", diag)

    def reconstruct(self, volume: Volume3D, t_start=None, seed=None) -> Volume3D:
        """Debug helper: the masked reconstruction the diffusion branch scores."""
        cfg = self.cfg
        v = to_working(volume, cfg.working_dims)
        body = postproc.body_mask(v, cfg.post)
        rec = reconstruct_volume(v, body, self.model, self.table, self.noise_cfg,
                                 cfg.t_start if t_start is None else t_start,
                                 cfg.seed if seed is None else seed, cfg.recon_margin, cfg.recon_chunk, cfg.workers)
        return v.with_data(rec * body.data)


def predict(volume: Volume3D, cfg: PipelineConfig, **kw) -> PredictionResult:
    return Pipeline(cfg, **kw).predict(volume)


# ------------------------------------------------------------------ evaluation


@dataclass
class SampleRecord:
    path: str
    label: str
    severity: str
    score: int
    branch: str
    dice: Optional[float] = None
    seconds: float = 0.0


@dataclass
class EvalReport:
    records: list
    sensitivity: dict
    group_counts: dict
    specificity: Optional[float]
    tp: int = 0
    fn: int = 0
    tn: int = 0
    fp: int = 0

    @property
    def n(self) -> int:
        return len(self.records)

    def dice_by_group(self) -> dict:
        out = {}
        for r in self.records:
            if r.dice is not None:
                out.setdefault(r.label, []).append(r.dice)
        return {k: float(np.mean(v)) for k, v in sorted(out.items())}


def dice(a, b) -> float:
    """Dice overlap; two empty masks count as perfect agreement."""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    s = a.sum() + b.sum()
    return 1.0 if s == 0 else float(2.0 * np.logical_and(a, b).sum() / s)


def summarize(records) -> EvalReport:
    """Sensitivity per label and per (label, severity); specificity over ID samples."""
    if not records:
        raise ValueError("nothing to summarise")
    hits, counts = {}, {}
    tp = fn = tn = fp = 0
    for r in records:
        if r.label == "in_distribution":
            tn += r.score == 0
            fp += r.score == 1
            continue
        tp += r.score == 1
        fn += r.score == 0
        for g in (r.label, f"{r.label}/{r.severity}"):
            counts[g] = counts.get(g, 0) + 1
            hits[g] = hits.get(g, 0) + r.score
    sens = {g: hits[g] / counts[g] for g in sorted(counts)}
    spec = tn / (tn + fp) if tn + fp else None
    return EvalReport(list(records), sens, dict(sorted(counts.items())), spec, tp, fn, tn, fp)


def evaluate(manifest: DatasetManifest, cfg: PipelineConfig, pipe: Pipeline = None, workers=None,
             split=None, progress=None) -> EvalReport:
    """Predict every manifest entry and reduce to an EvalReport.

    Sample ``i`` is seeded with ``(cfg.seed, i)``; samples may run on
    ``workers`` threads without changing the result.
    """
    entries = manifest.select(split=split)
    if not entries:
        raise ValueError("empty manifest")
    pipe = pipe or Pipeline(cfg)
    workers = cfg.workers if workers is None else workers

    def one(i):
        e = entries[i]
        res = pipe.predict(read_volume(manifest.resolve(e.path)), seed=derive_seed(cfg.seed, i), workers=1)
        d = None
        if e.mask not in (None, "", "sample_only"):
            d = dice(res.pixel_mask.data, read_mask(manifest.resolve(e.mask)).data)
        rec = SampleRecord(e.path, e.label, e.severity, res.sample_score, res.branch, d,
                           res.diagnostics.get("seconds", 0.0))
        if progress:
            progress(i, rec)
        return rec

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            records = list(ex.map(one, range(len(entries))))
    else:
        records = [one(i) for i in range(len(entries))]
    return summarize(records)


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


def report_csv(report: EvalReport, path=None) -> str:
    """group,n,sensitivity rows sorted by group; empty groups leave sensitivity blank."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "n", "sensitivity"])
    for g in sorted(report.group_counts):
        n = report.group_counts[g]
        w.writerow([g, n, _fmt(report.sensitivity.get(g)) if n else ""])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def report_plotdata(report: EvalReport, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "label", "severity", "score", "branch", "dice"])
    for r in sorted(report.records, key=lambda r: r.path):
        w.writerow([r.path, r.label, r.severity, r.score, r.branch, _fmt(r.dice)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
