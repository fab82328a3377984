"""Command line entry point: ``moodkit <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import diffusion, synthdata
from .denoiser import DenoiserModel, TrainConfig, Trainer, load_checkpoint, save_checkpoint
from .errors import ConfigMismatch, FormatError, MoodkitError
from .histood import N_BINS, build_reference
from .pipeline import (WORKING_DIMS, Pipeline, PipelineConfig, collect_training_slices, evaluate,
                       report_csv, report_plotdata)
from .volcore import DatasetManifest, read_volume, write_volume

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_CONFIG = 0, 2, 3, 4

log = logging.getLogger("moodkit")


def _cmd_gen_phantoms(a):
    m = synthdata.generate_corpus(a.out, a.count, a.dims, a.seed)
    print(f"wrote {len(m.entries)} phantoms to {a.out}")


def _cmd_gen_benchmark(a):
    src = DatasetManifest.load(Path(a.inp) / "manifest.json")
    pool = synthdata.load_sources(src, split="val") or synthdata.load_sources(src, split="train")
    m = synthdata.build_benchmark(a.n_id, a.per_cell, a.out, a.seed, a.region, sources=pool,
                                  workers=a.workers)
    print(f"wrote {len(m.entries)} benchmark cases to {a.out}")


def _cmd_build_ref(a):
    m = DatasetManifest.load(a.manifest)
    ref = build_reference(m, a.region, a.dims, a.bins, split=a.split)
    ref.save(a.out)
    print(f"reference from {ref.n_volumes} volumes -> {a.out}")


def _cmd_train(a):
    m = DatasetManifest.load(a.manifest)
    slices = collect_training_slices(m, a.dims, split="train")
    if a.resume:
        tr = load_checkpoint(a.resume)
    else:
        sched = diffusion.SchedulerConfig()
        cfg = TrainConfig(learning_rate=a.lr, batch_size=a.batch, epochs=a.epochs, seed=a.seed)
        tr = Trainer(DenoiserModel.initialized(seed=a.seed), diffusion.build_schedule(sched),
                     cfg=cfg, sched_cfg=sched)

    def done(t):
        print(f"epoch {t.epoch} loss {t.history[-1]:.5f}", flush=True)
        save_checkpoint(a.out, t)

    tr.fit(slices, epochs=a.epochs, callback=done)


def _pipeline(a) -> Pipeline:
    cfg = PipelineConfig.preset(a.region, a.scale, t_start=a.t_start, checkpoint=a.ckpt,
                                reference=getattr(a, "ref", None), seed=a.seed, workers=a.workers)
    return Pipeline(cfg)


def _cmd_predict(a):
    res = _pipeline(a).predict(read_volume(a.input))
    res.write(a.out_pixel, a.out_sample)
    print(f"score {res.sample_score} branch {res.branch} voxels {res.pixel_mask.count()}")


def _cmd_evaluate(a):
    pipe = _pipeline(a)
    m = DatasetManifest.load(a.manifest)
    rep = evaluate(m, pipe.cfg, pipe, progress=lambda i, r: log.info("%s -> %d (%s)", r.path, r.score, r.branch))
    sys.stdout.write(report_csv(rep, a.out_csv))
    if a.out_plot:
        report_plotdata(rep, a.out_plot)
    if rep.specificity is not None:
        print(f"specificity {rep.specificity:.3f}")


def _cmd_recon(a):
    tr = load_checkpoint(a.ckpt)
    cfg = PipelineConfig.preset(a.region, a.scale, t_start=a.t_start, seed=a.seed)
    pipe = Pipeline(cfg, reference=_NoRef(), model=tr.model, noise_cfg=tr.noise_cfg)
    write_volume(pipe.reconstruct(read_volume(a.input)), a.out)


class _NoRef:
    """Placeholder; recon never consults the histogram reference."""


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moodkit", description="Two-branch OOD detection for 3D scans.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("gen-phantoms", help="write a synthetic training corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--dims", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=_cmd_gen_phantoms)

    s = sub.add_parser("gen-benchmark", help="write an OOD benchmark from a phantom corpus")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--region", choices=("brain", "abdomen"), default="brain")
    s.add_argument("--per-cell", type=int, default=10)
    s.add_argument("--n-id", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(fn=_cmd_gen_benchmark)

    s = sub.add_parser("build-ref", help="training histogram statistics")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bins", type=int, default=N_BINS)
    s.add_argument("--region", choices=("brain", "abdomen"), default="brain")
    s.add_argument("--dims", type=int, default=64)
    s.add_argument("--split", default="train")
    s.set_defaults(fn=_cmd_build_ref)

    s = sub.add_parser("train", help="train the slice denoiser")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", type=int, default=64)
    s.add_argument("--resume", default=None, help="continue from this checkpoint")
    s.set_defaults(fn=_cmd_train)

    def common(s, ref=True):
        if ref:
            s.add_argument("--ref", required=True)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--region", choices=("brain", "abdomen"), default="brain")
        s.add_argument("--scale", choices=tuple(WORKING_DIMS), default="desk")
        s.add_argument("--t-start", type=int, default=None,
                       help="diffusion start step (default: 10 for desk, 200 for paper)")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("predict", help="score one volume")
    s.add_argument("--input", required=True)
    s.add_argument("--out-pixel", required=True)
    s.add_argument("--out-sample", required=True)
    common(s)
    s.set_defaults(fn=_cmd_predict)

    s = sub.add_parser("evaluate", help="score a labelled manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-csv", required=True)
    s.add_argument("--out-plot", default=None)
    common(s)
    s.set_defaults(fn=_cmd_evaluate)

    s = sub.add_parser("recon", help="dump the masked diffusion reconstruction")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    common(s, ref=False)
    s.set_defaults(fn=_cmd_recon)
    return p


def main(argv=None) -> int:
    p = build_parser()
    try:
        a = p.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ARGS
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        a.fn(a)
    except ConfigMismatch as exc:
        print(f"moodkit: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"moodkit: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, MoodkitError) as exc:
        print(f"moodkit: {exc}", file=sys.stderr)
        return EXIT_ARGS
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
