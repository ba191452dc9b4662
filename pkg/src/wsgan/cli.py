"""``wsgan`` command line: run | evaluate | generate | report | toydata.

Exit codes: 0 success, 1 config/usage error, 2 missing prerequisite,
3 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import toydata
from .checkpoint import CheckpointError, LifecycleError
from .config import ConfigError, RunConfig, SplitSpec
from .data import ManifestError, load_images, load_manifest, sample_splits, write_image
from .metrics import MetricsLog
from .pipeline import (
    STAGE_FILES,
    MissingPrerequisite,
    evaluate,
    load_classifier,
    load_data,
    load_generator,
    run_stages,
    single_worker,
    stage_path,
)
from .report import EmptyLedger, write_report

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("wsgan")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_stages(text: str) -> list[int]:
    try:
        stages = sorted({int(s) for s in text.replace(" ", "").split(",") if s})
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid stage list {text!r}")
    if not stages or any(s not in STAGE_FILES for s in stages):
        raise argparse.ArgumentTypeError("stages must be a comma-separated subset of 1,2,3,4")
    return stages


def _prerequisites(stages: list[int]) -> dict[int, list[tuple[int, str]]]:
    """For each requested stage, the checkpoints it needs from earlier stages not being run."""
    needs = {
        2: [(1, "encoder.ckpt")],
        3: [(2, "g_best.ckpt"), (2, "discriminator.ckpt")],
        4: [(2, "g_best.ckpt"), (3, "discriminator.ckpt")],
    }
    out = {}
    for s in stages:
        out[s] = [(k, name) for k, name in needs.get(s, []) if k not in stages]
    return out


def cmd_run(args) -> int:
    try:
        cfg = RunConfig.load(args.config)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        cfg.stages.seed = args.seed
    base = args.out or os.environ.get("WSGAN_RUN_DIR") or cfg.output_dir
    run_dir = Path(base) / cfg.run_id
    stages = args.stages

    clash = [s for s in stages if (run_dir / STAGE_FILES[s][0]).exists()]
    if clash and not args.force:
        print(f"run {cfg.run_id!r} already has stage(s) {clash} in {run_dir}; use --force to overwrite",
              file=sys.stderr)
        return EXIT_USAGE
    for s, reqs in _prerequisites(stages).items():
        for k, name in reqs:
            if not stage_path(run_dir, k, name).exists():
                print(f"stage {s} needs stage-{k} checkpoint {run_dir / STAGE_FILES[k][0] / name}",
                      file=sys.stderr)
                return EXIT_MISSING
    for s in clash:
        shutil.rmtree(run_dir / STAGE_FILES[s][0])
    if not cfg.manifest:
        print("config error: manifest path is required", file=sys.stderr)
        return EXIT_USAGE
    manifest_path = Path(cfg.manifest)
    if not manifest_path.is_absolute() and not manifest_path.exists():
        manifest_path = Path(args.config).parent / manifest_path
    cfg.manifest = str(manifest_path)

    single_worker()
    try:
        data = load_data(cfg)
    except (FileNotFoundError, ManifestError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    for s in stages:
        (run_dir / STAGE_FILES[s][0]).mkdir(parents=True, exist_ok=True)
    try:
        run_stages(cfg, data, stages, run_dir=run_dir)
    except (MissingPrerequisite, LifecycleError) as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"run complete: {run_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        disc, ckpt = load_classifier(args.checkpoint)
        manifest = load_manifest(args.manifest)
    except (FileNotFoundError, CheckpointError, ManifestError) as exc:
        print(f"evaluate: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if manifest.n_classes != disc.n_classes:
        print(f"evaluate: checkpoint has {disc.n_classes} classes, manifest has {manifest.n_classes}",
              file=sys.stderr)
        return EXIT_USAGE
    indices = None
    if not args.all and "split" in ckpt.header:
        try:
            indices = sample_splits(manifest, SplitSpec(**ckpt.header["split"])).heldout
        except ValueError:
            indices = None
    if not indices:
        indices = [i for i, (_, y) in enumerate(manifest.entries) if y is not None]
    images = load_images(manifest, indices, disc.image_size)
    acc = evaluate(disc, images)
    print(f"top1 {acc:.4f} on {len(images)} images")
    csv_path = Path(args.csv) if args.csv else Path(args.checkpoint).parent / "evaluation.csv"
    MetricsLog(csv_path, seed=ckpt.header.get("seed", 0)).log("eval", int(ckpt.header.get("epoch", 0)), "top1", acc)
    return EXIT_OK


def _grid(images: torch.Tensor, size: int) -> torch.Tensor:
    n = len(images)
    if n == 0:
        return torch.full((1, size, size), -1.0)
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = torch.full((1, rows * size, cols * size), -1.0)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        grid[:, r * size : (r + 1) * size, c * size : (c + 1) * size] = img
    return grid


def cmd_generate(args) -> int:
    if args.count < 0:
        print("generate: count must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    try:
        gen = load_generator(args.checkpoint)
    except (FileNotFoundError, CheckpointError) as exc:
        print(f"generate: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    noise = torch.Generator().manual_seed(args.seed)
    with torch.no_grad():
        imgs = gen(torch.randn(args.count, gen.noise_dim, generator=noise)) if args.count else torch.zeros(0)
    for i, img in enumerate(imgs):
        write_image(img, out / f"sample_{i:04d}.png")
    size = gen.start * 2**gen.n_blocks
    write_image(_grid(imgs, size), out / "grid.png")
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        paths = write_report(args.run_dirs, args.out)
    except FileNotFoundError as exc:
        print(f"report: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (EmptyLedger, ValueError) as exc:
        print(f"report: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_toydata(args) -> int:
    path = toydata.build(args.kind, args.out, args.n, args.size, args.seed)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wsgan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run training stages")
    r.add_argument("--config", required=True, help="run config (JSON)")
    r.add_argument("--stages", type=_parse_stages, default=[1, 2, 3, 4], help="comma-separated subset of 1,2,3,4 (default: all)")
    r.add_argument("--seed", type=int, help="override stages.seed")
    r.add_argument("--force", action="store_true", help="overwrite existing stage outputs")
    r.add_argument("--out", help="output directory (overrides config and WSGAN_RUN_DIR)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("evaluate", help="top-1 accuracy of a classifier checkpoint")
    e.add_argument("--checkpoint", required=True, help="stage 2-4 discriminator checkpoint")
    e.add_argument("--manifest", required=True, help="dataset manifest to score on")
    e.add_argument("--all", action="store_true", help="use every labeled entry, not the held-out split")
    e.add_argument("--csv", help="CSV to append the result to")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("generate", help="sample images from a generator checkpoint")
    g.add_argument("--checkpoint", required=True, help="generator checkpoint (stage2/g_best.ckpt)")
    g.add_argument("--count", type=int, default=16, help="number of sample PNGs (default 16)")
    g.add_argument("--out", required=True, help="directory for sample_NNNN.png and grid.png")
    g.add_argument("--seed", type=int, default=0, help="noise seed")
    g.set_defaults(func=cmd_generate)

    rep = sub.add_parser("report", help="plot metric curves of one or more runs")
    rep.add_argument("run_dirs", nargs="+", help="run directories (or metrics.csv files) to overlay")
    rep.add_argument("--out", help="plot directory (default: <first run>/report)")
    rep.set_defaults(func=cmd_report)

    t = sub.add_parser("toydata", help="write a synthetic dataset and its manifest")
    t.add_argument("--kind", choices=["shapes", "digits"], default="shapes")
    t.add_argument("--out", required=True)
    t.add_argument("--n", type=int, default=1600, help="number of images")
    t.add_argument("--size", type=int, help="image side (default 64 for shapes, 16 for digits)")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_toydata)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
