"""Command-line entry point: ``asrgan train | sr | eval | bench-fsa | fixtures``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .attention import FSAConfig, SelfAttention, attention_map_elements, fsa, map_to_image
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, TrainConfig
from .imaging import (
    CropError,
    ImageError,
    load_dataset,
    load_image,
    make_synthetic_dataset,
    read_manifest,
    save_gray,
    save_image,
    upscale,
)
from .metrics import PSNR_TARGET, SSIM_TARGET, evaluate_set
from .models import ModelConfigError, summarize
from .tensor import Tensor
from .train import NumericalAbort, generator_from_checkpoint, super_resolve, train_gan, train_resnet

logger = logging.getLogger("asrgan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_MAP_CAP = 1 << 26     # attention-map entries (512 MiB of float64)


class CliError(Exception):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.code = code


def _fail_config(message: str) -> CliError:
    return CliError(message, EXIT_CONFIG)


def _fail_data(message: str) -> CliError:
    return CliError(message, EXIT_DATA)


def _load_model_checkpoint(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise _fail_config(str(exc)) from exc


def _min_pool_for_cap(height: int, width: int, cap: int) -> int:
    p = 1
    while attention_map_elements(height, width, p) > cap:
        p += 1
    return p


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    overrides = {"phase": args.phase}
    if args.steps is not None:
        overrides["steps"] = args.steps
    try:
        config = TrainConfig.load(args.config, **overrides) if args.config else TrainConfig(**overrides)
    except (ConfigError, TypeError) as exc:
        raise _fail_config(f"config: {exc}") from exc
    if config.phase == "gan" and not args.init:
        raise _fail_config("--phase gan requires --init CHECKPOINT")
    init = _load_model_checkpoint(args.init) if args.init else None

    try:
        dataset = load_dataset(args.data)
    except (ImageError, OSError) as exc:
        raise _fail_data(f"data: {exc}") from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.dumps(), encoding="utf-8")
    (out / "train.log").unlink(missing_ok=True)
    start = time.perf_counter()
    try:
        if config.phase == "resnet":
            ckpt = train_resnet(config, dataset, resume=init, out_dir=out)
        else:
            ckpt = train_gan(config, dataset, init, out_dir=out)
    except CropError as exc:
        raise _fail_data(f"data: {exc}") from exc
    except (CheckpointError, ModelConfigError) as exc:
        raise _fail_config(str(exc)) from exc
    except NumericalAbort as exc:
        raise CliError(f"{exc}; last good state in {out / 'last_good.asrg'}", EXIT_NUMERIC) from exc

    manifest = {
        "phase": config.phase,
        "global_step": ckpt.global_step,
        "seed": config.seed,
        "workers": config.workers,
        "images": len(dataset),
        "data": str(Path(args.data).resolve()),
        "init": str(Path(args.init).resolve()) if args.init else None,
        "checkpoint": "final.asrg",
        "seconds": round(time.perf_counter() - start, 3),
        "version": __version__,
    }
    (out / "run.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"trained to step {ckpt.global_step}; checkpoint {out / 'final.asrg'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sr


def cmd_sr(args) -> int:
    ckpt = _load_model_checkpoint(args.model)
    try:
        gen = generator_from_checkpoint(ckpt, pool_size=args.pool_size)
    except (ConfigError, ModelConfigError, CheckpointError) as exc:
        raise _fail_config(str(exc)) from exc
    try:
        lr = load_image(args.input)
    except (ImageError, OSError) as exc:
        raise _fail_data(str(exc)) from exc

    if gen.attention is not None:
        p = gen.attention.pool_size
        need = attention_map_elements(lr.height, lr.width, p)
        if need > args.max_map_elements:
            hint = _min_pool_for_cap(lr.height, lr.width, args.max_map_elements)
            raise _fail_config(
                f"attention map for {lr.height}x{lr.width} at pool size {p} has {need} entries "
                f"(cap {args.max_map_elements}); use --pool-size {hint} or larger")
        gen.attention.keep_map = bool(args.dump_attention)
    elif args.dump_attention:
        raise _fail_config("model has no attention layer to dump")

    sr = super_resolve(gen, lr)
    save_image(sr, args.output)
    if args.dump_attention:
        save_gray(map_to_image(gen.attention.last_map), args.dump_attention)
    print(f"{lr.height}x{lr.width} -> {sr.height}x{sr.width}: {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _fmt(x: float) -> str:
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf"
    return f"{x:.6f}"


def cmd_eval(args) -> int:
    if args.model == "bicubic":
        model = upscale
    else:
        ckpt = _load_model_checkpoint(args.model)
        try:
            gen = generator_from_checkpoint(ckpt, pool_size=args.pool_size)
        except (ConfigError, ModelConfigError, CheckpointError) as exc:
            raise _fail_config(str(exc)) from exc

        def model(lr):
            return super_resolve(gen, lr)

    try:
        rows = read_manifest(args.manifest)
    except OSError as exc:
        raise _fail_data(f"manifest: {exc}") from exc
    if not rows:
        raise _fail_data(f"manifest {args.manifest} lists no images")

    result = evaluate_set(model, rows, workers=args.workers)
    baseline = evaluate_set(upscale, rows, workers=args.workers)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["image", "psnr", "ssim", "bicubic_psnr", "bicubic_ssim", "status"])
        for r, b in zip(result.rows, baseline.rows):
            w.writerow([r.image_id, _fmt(r.psnr), _fmt(r.ssim), _fmt(b.psnr), _fmt(b.ssim), r.error or "ok"])
        w.writerow(["baseline", _fmt(baseline.mean.psnr), _fmt(baseline.mean.ssim), "", "", "bicubic"])
        w.writerow(["mean", _fmt(result.mean.psnr), _fmt(result.mean.ssim), "", "", "model"])

    summary = {
        "images": len(rows),
        "failed": result.failed,
        "infinite_psnr": result.infinite_psnr,
        "mean_psnr": _fmt(result.mean.psnr),
        "mean_ssim": _fmt(result.mean.ssim),
        "baseline_psnr": _fmt(baseline.mean.psnr),
        "baseline_ssim": _fmt(baseline.mean.ssim),
        "psnr_target": _fmt(PSNR_TARGET),
        "ssim_target": _fmt(SSIM_TARGET),
        "meets_psnr_target": str(result.mean.psnr >= PSNR_TARGET).lower(),
        "meets_ssim_target": str(result.mean.ssim >= SSIM_TARGET).lower(),
    }
    summary_path = out.with_suffix(".summary.txt")
    summary_path.write_text("".join(f"{k}={v}\n" for k, v in summary.items()), encoding="utf-8")
    print(f"mean psnr {summary['mean_psnr']} ssim {summary['mean_ssim']} "
          f"(bicubic {summary['baseline_psnr']} / {summary['baseline_ssim']}); report {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench-fsa


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def bench_fsa(sizes, pools, channels: int = 8, cap: int = DEFAULT_MAP_CAP, seed: int = 0) -> list[dict]:
    """Measure the attention-map allocation and time for each (size, pool) pair."""
    layer = SelfAttention(channels, rng=seed)
    layer.gamma.data = np.array(0.5)
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        x = Tensor(rng.standard_normal((1, channels, size, size)))
        for p in pools:
            expected = attention_map_elements(size, size, p)
            row = {"size": size, "pool": p, "map_side": math.isqrt(expected), "map_elements": expected}
            if expected > cap:
                rows.append({**row, "measured_peak": "", "ms": "", "status": "skipped(oom-guard)"})
                continue
            with T.no_grad(), T.AllocationTracker() as tracker:
                start = time.perf_counter()
                fsa(x, layer, FSAConfig(p))
                ms = 1000.0 * (time.perf_counter() - start)
            rows.append({**row, "measured_peak": tracker.peak_by_op["softmax"], "ms": f"{ms:.2f}", "status": "ok"})
    return rows


def cmd_bench_fsa(args) -> int:
    rows = bench_fsa(args.sizes, args.pools, args.channels, args.max_map_elements)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"H=W={r['size']:<5} p={r['pool']:<3} map={r['map_elements']:<12} "
              f"peak={r['measured_peak']:<12} {r['status']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fixtures / summary


def cmd_fixtures(args) -> int:
    manifest = make_synthetic_dataset(args.out, args.count, args.size, seed=args.seed, write_lr=not args.no_lr)
    print(manifest)
    return EXIT_OK


def cmd_summary(args) -> int:
    try:
        config = TrainConfig.load(args.config) if args.config else TrainConfig()
        from .models import build_discriminator, build_generator
        print(summarize(build_generator(config.generator_config())))
        if args.discriminator:
            print()
            print(summarize(build_discriminator(config.discriminator_config())))
    except (ConfigError, ModelConfigError) as exc:
        raise _fail_config(str(exc)) from exc
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asrgan", description="Attention super-resolution GAN toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pre-train the generator or run GAN training")
    p.add_argument("--phase", choices=("resnet", "gan"), default="resnet")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True, help="manifest.tsv of HR[<TAB>LR] paths")
    p.add_argument("--init", help="checkpoint to resume (resnet) or to start GAN training from")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, help="override the config's step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sr", help="super-resolve one PNG")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--pool-size", type=int, default=None, help="FSA pool size (default: as trained)")
    p.add_argument("--dump-attention", metavar="PNG", help="write the attention map as grayscale")
    p.add_argument("--max-map-elements", type=int, default=DEFAULT_MAP_CAP)
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("eval", help="PSNR/SSIM report over a manifest")
    p.add_argument("--model", required=True, help="checkpoint, or 'bicubic'")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report TSV; a .summary.txt is written alongside")
    p.add_argument("--pool-size", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-fsa", help="attention-map size and time versus pool size")
    p.add_argument("--sizes", type=_int_list, default=[16, 32, 64])
    p.add_argument("--pools", type=_int_list, default=[1, 2, 4])
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--max-map-elements", type=int, default=DEFAULT_MAP_CAP)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_fsa)

    p = sub.add_parser("fixtures", help="write a synthetic HR/LR dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=256, help="HR side length (multiple of 4)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-lr", action="store_true", help="omit LR files; they are induced on load")
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("summary", help="print the layer table for a config")
    p.add_argument("--config")
    p.add_argument("--discriminator", action="store_true")
    p.set_defaults(func=cmd_summary)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "pool_size", None) is not None and args.pool_size < 1:
        parser.error("--pool-size must be >= 1")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
