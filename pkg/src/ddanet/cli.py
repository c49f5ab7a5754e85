"""Command-line interface: train / infer / eval / bench / synth.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command is
deterministic given its full flag set. Set DDANET_THREADS to cap the BLAS
thread count (default: all cores); it must be set before numpy loads, which
is why the heavy imports below live inside the command handlers.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

_threads = os.environ.get("DDANET_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)


def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def _size16(value: str) -> int:
    n = int(value)
    if n < 16 or n % 16:
        raise argparse.ArgumentTypeError(f"size must be a positive multiple of 16, got {value}")
    return n


def _fraction(value: str) -> float:
    f = float(value)
    if not 0.0 < f <= 1.0:
        raise argparse.ArgumentTypeError(f"fraction must lie in (0, 1], got {value}")
    return f


def _widths(value: str) -> tuple:
    parts = tuple(int(p) for p in value.split(","))
    if len(parts) != 4 or any(p < 1 for p in parts):
        raise argparse.ArgumentTypeError(f"expected 4 positive widths, got {value}")
    return parts


def _stages(value: str) -> frozenset:
    if value.strip().lower() in ("none", ""):
        return frozenset()
    stages = frozenset(int(p) for p in value.split(","))
    if not stages <= {1, 2, 3, 4}:
        raise argparse.ArgumentTypeError(f"attention stages must be in 1..4, got {value}")
    return stages


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddanet",
                                     description="Dual-decoder attention segmentation network")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write a checkpoint")
    src = p_train.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="dataset root with images/ and masks/")
    src.add_argument("--synthetic", type=_positive_int, metavar="N",
                     help="generate N synthetic images instead of reading a directory")
    p_train.add_argument("--size", type=_size16, default=64, help="training resolution")
    p_train.add_argument("--epochs", type=_positive_int, default=50)
    p_train.add_argument("--batch", type=_positive_int, default=4)
    p_train.add_argument("--lr", type=float, default=1e-4)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", type=Path, required=True, help="checkpoint output path")
    p_train.add_argument("--log", type=Path, default=None,
                         help="per-epoch ndjson log (default: <out>.log)")
    p_train.add_argument("--widths", type=_widths, default=(32, 64, 128, 256),
                         help="encoder channel widths, e.g. 4,8,16,32")
    p_train.add_argument("--se-ratio", type=_positive_int, default=8)
    p_train.add_argument("--attention", type=_stages, default=frozenset({1, 2, 3}),
                         help="decoder attention stages, e.g. 1,2,3 or 'none'")
    p_train.add_argument("--train-fraction", type=_fraction, default=1.0,
                         help="hold out 1-f of the data for validation (1.0 = train on all)")
    p_train.add_argument("--recon-weight", type=float, default=1.0,
                         help="weight of the grayscale reconstruction loss")
    p_train.add_argument("--checkpoint-every", type=int, default=0,
                         help="also write the checkpoint every K epochs")
    p_train.set_defaults(func=cmd_train)

    p_infer = sub.add_parser("infer", help="predict masks for images")
    p_infer.add_argument("--model", type=Path, required=True)
    p_infer.add_argument("--input", type=Path, required=True, help="image file or directory")
    p_infer.add_argument("--outdir", type=Path, required=True)
    p_infer.add_argument("--gray", action="store_true", help="also write reconstructions")
    p_infer.add_argument("--attn", action="store_true", help="also write attention maps")
    p_infer.set_defaults(func=cmd_infer)

    p_eval = sub.add_parser("eval", help="evaluate a model on a dataset")
    p_eval.add_argument("--model", type=Path, required=True)
    p_eval.add_argument("--data", type=Path, required=True)
    p_eval.add_argument("--report", type=Path, required=True, help="metrics JSON output path")
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench", help="measure single-image forward throughput")
    p_bench.add_argument("--model", type=Path, required=True)
    p_bench.add_argument("--size", type=_size16, default=None,
                         help="input resolution (default: the checkpoint's)")
    p_bench.add_argument("--n", type=_positive_int, default=100, help="timed iterations")
    p_bench.add_argument("--warmup", type=int, default=10)
    p_bench.add_argument("--report", type=Path, default=None, help="optional JSON output")
    p_bench.set_defaults(func=cmd_bench)

    p_synth = sub.add_parser("synth", help="write a synthetic dataset to disk")
    p_synth.add_argument("--n", type=_positive_int, required=True)
    p_synth.add_argument("--size", type=_size16, default=64)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", type=Path, required=True, help="dataset root directory")
    p_synth.set_defaults(func=cmd_synth)

    return parser


def cmd_train(args) -> int:
    from .data import SplitSpec, from_directory, split, synthetic_blobs
    from .losses import LossConfig
    from .model import ModelConfig
    from .training import TrainConfig, train

    if args.data is not None:
        dataset = from_directory(args.data)
    else:
        dataset = synthetic_blobs(args.synthetic, args.size, args.seed)
    val = None
    if args.train_fraction < 1.0:
        dataset, val = split(dataset, SplitSpec(args.train_fraction, args.seed))

    model_cfg = ModelConfig(channel_widths=args.widths, se_ratio=args.se_ratio,
                            attention_stages=args.attention)
    train_cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch,
                            input_size=args.size, seed=args.seed,
                            checkpoint_every=args.checkpoint_every)
    loss_cfg = LossConfig(reconstruction_weight=args.recon_weight)
    log_path = args.log if args.log is not None else Path(str(args.out) + ".log")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    _, log = train(model_cfg, train_cfg, dataset, val_dataset=val, loss_cfg=loss_cfg,
                   out_path=args.out, log_path=log_path)
    last = log[-1]
    print(f"trained {len(log)} epochs, final loss {last['loss_total']:.4f}, "
          f"val dsc {last['val_dsc']:.4f}; checkpoint: {args.out}")
    return 0


def _input_files(path: Path) -> list[Path]:
    if path.is_dir():
        return [p for p in sorted(path.iterdir())
                if p.suffix.lower() in (".png", ".jpg", ".jpeg")]
    return [path]


def cmd_infer(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .data import load_image, resize_bilinear, save_gray, save_mask
    from .model import forward
    from .tensor import Tensor

    ckpt = load_checkpoint(args.model)
    params = ckpt.to_params()
    size = ckpt.train_config.input_size
    files = _input_files(args.input)
    if not files:
        print(f"error: no input images under {args.input}", file=sys.stderr)
        return 1
    args.outdir.mkdir(parents=True, exist_ok=True)

    n_ok = 0
    for path in files:
        try:
            img = load_image(path)
        except IOError as exc:
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
            continue
        h, w = img.shape[2], img.shape[3]
        x = resize_bilinear(img, size, size) if (h, w) != (size, size) else img
        out = forward(params, Tensor(x), mode="eval")
        mask = resize_bilinear(out.mask.data.astype(np.float64), h, w)
        save_mask(args.outdir / f"{path.stem}_mask.png", (mask >= 0.5).astype(np.float32))
        if args.gray:
            gray = resize_bilinear(out.gray.data.astype(np.float64), h, w)
            save_gray(args.outdir / f"{path.stem}_gray.png", gray)
        if args.attn:
            for stage, attn in zip(sorted(params.config.attention_stages), out.attention_maps):
                a = attn.data.astype(np.float64)
                lo, hi = a.min(), a.max()
                scaled = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
                save_gray(args.outdir / f"{path.stem}_attn{stage}.png",
                          resize_bilinear(scaled, h, w))
        n_ok += 1
    if n_ok == 0:
        print("error: no input could be processed", file=sys.stderr)
        return 1
    print(f"wrote predictions for {n_ok}/{len(files)} inputs to {args.outdir}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import from_directory
    from .training import evaluate

    ckpt = load_checkpoint(args.model)
    dataset = from_directory(args.data)
    report = evaluate(ckpt, dataset)
    args.report.parent.mkdir(parents=True, exist_ok=True)
    args.report.write_text(report.to_json() + "\n")
    print(report.summary())
    return 0


def cmd_bench(args) -> int:
    import json

    from .checkpoint import load_checkpoint
    from .metrics import fps_benchmark

    ckpt = load_checkpoint(args.model)
    size = args.size if args.size is not None else ckpt.train_config.input_size
    result = fps_benchmark(ckpt.to_params(), size, n_warmup=args.warmup, n_timed=args.n)
    print(f"fps={result['fps']:.2f} at {size}x{size} "
          f"(latency mean={result['latency_mean'] * 1e3:.2f}ms "
          f"p50={result['latency_p50'] * 1e3:.2f}ms p95={result['latency_p95'] * 1e3:.2f}ms, "
          f"n={result['n_timed']})")
    if args.report:
        args.report.parent.mkdir(parents=True, exist_ok=True)
        args.report.write_text(json.dumps(result, indent=2) + "\n")
    return 0


def cmd_synth(args) -> int:
    from .data import export_dataset, synthetic_blobs

    dataset = synthetic_blobs(args.n, args.size, args.seed)
    export_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} image/mask pairs to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
