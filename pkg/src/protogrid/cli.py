"""Command-line entry point for the full experiment workflow."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_experiment_config
from .data.digits import load_digit_pool, render_digit_pool, save_digit_pool
from .data.manifest import load_raster_dataset, save_raster_dataset
from .data.synthetic import append_noise_channel, generate_synthetic_mnist
from .explain import channel_weight_summary, local_explanation, top_prototype_frequency
from .report import ExplanationBundle, render_reports
from .training import cyclic_adjacency, evaluate, train

log = logging.getLogger("protogrid")


def _positive_threads(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("thread count must be >= 1")
    return n


def _apply_threads(args: argparse.Namespace) -> None:
    threads = args.threads or int(os.environ.get("PROTOGRID_THREADS", 0)) or None
    if threads:
        torch.set_num_threads(threads)


def _parse_fractions(text: str) -> tuple[float, float, float]:
    parts = [float(tok) for tok in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated fractions")
    return tuple(parts)  # type: ignore[return-value]


def _parse_adjacency(text: str | None):
    if not text:
        return None
    if not text.startswith("cyclic:") or "-" not in text[7:]:
        raise ValueError(f"expected adjacency like 'cyclic:1-8', got {text!r}")
    lo, hi = text[7:].split("-", 1)
    return cyclic_adjacency(int(lo), int(hi))


def cmd_generate_data(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if args.task == "digit-pool":
        pool = render_digit_pool(args.per_class, seed=args.seed, distortion=args.distortion)
        save_digit_pool(pool, out)
        print(f"wrote digit pool ({len(pool.labels)} images) to {out}")
        return 0
    if args.task == "synthetic-mnist":
        if not args.mnist:
            raise ValueError("--mnist is required for --task synthetic-mnist")
        pool = load_digit_pool(args.mnist)
        dataset = generate_synthetic_mnist(
            pool, n_total=args.n_total, fractions=args.fractions, seed=args.seed
        )
        if args.noise_channel:
            dataset = append_noise_channel(dataset, seed=args.seed + 1)
        manifest = save_raster_dataset(dataset, out)
        sizes = (len(dataset.train), len(dataset.validation), len(dataset.test))
        print(f"wrote {sizes[0]}/{sizes[1]}/{sizes[2]} samples, manifest {manifest}")
        return 0
    raise ValueError(f"unknown --task {args.task!r}")


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, overrides={"data": args.data, "out_dir": args.out})
    if not cfg.data:
        raise ValueError("no dataset: set 'data' in the config or pass --data")
    dataset = load_raster_dataset(cfg.data)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_cfg = cfg.train
    if args.resume:
        resumed = load_checkpoint(args.resume)
        if resumed.model_config.kind != train_cfg.model_kind:
            raise ValueError(
                f"--resume checkpoint is {resumed.model_config.kind}, config wants {train_cfg.model_kind}"
            )
    result = train(train_cfg, dataset, history_path=out_dir / "metrics.jsonl")
    ckpt_path = out_dir / "model.ckpt"
    save_checkpoint(result.model, ckpt_path, extra={"best_val_accuracy": result.best_val_accuracy})
    adjacency = _parse_adjacency(cfg.plus_minus_one)
    metrics = evaluate(result.model, dataset.test, adjacency=adjacency)
    (out_dir / "test_metrics.json").write_text(json.dumps(metrics.to_dict(), indent=2))
    print(f"checkpoint: {ckpt_path}")
    print(f"test accuracy: {metrics.accuracy:.4f}")
    if metrics.plus_minus_one is not None:
        print(f"test +/-1 accuracy: {metrics.plus_minus_one:.4f}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.ckpt)
    dataset = load_raster_dataset(args.data)
    if dataset.num_channels != model.model_config.num_channels:
        raise ValueError(
            f"checkpoint expects {model.model_config.num_channels} channels, "
            f"dataset has {dataset.num_channels}"
        )
    metrics = evaluate(model, dataset.part(args.split), adjacency=_parse_adjacency(args.plus_minus_one))
    text = json.dumps(metrics.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_explain(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.ckpt)
    dataset = load_raster_dataset(args.data)
    part = dataset.part(args.split)
    sample = part.sample_by_id(args.sample)
    explanation = local_explanation(model, sample, top_k=args.top_k)
    bundle = ExplanationBundle(locals=[explanation])
    written = render_reports(bundle, args.out, dataset=dataset)
    print(f"predicted class {explanation.predicted_class} (p={explanation.probability:.4f})")
    for path in written:
        print(f"wrote {path}")
    return 0


def _parse_class_group(text: str | None, k: int) -> set[int] | None:
    if not text:
        return None
    group = set()
    for token in (tok.strip() for tok in text.split(",") if tok.strip()):
        try:
            label = int(token)
        except ValueError:
            raise ValueError(
                f"class group entries must be integer labels in [0, {k}); got {token!r}"
            ) from None
        if not 0 <= label < k:
            raise ValueError(f"class label {label} outside [0, {k})")
        group.add(label)
    return group or None


def cmd_global_report(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.ckpt)
    dataset = load_raster_dataset(args.data)
    group = _parse_class_group(args.class_group, model.num_classes)
    summary = channel_weight_summary(model, near_zero=args.near_zero)
    frequency = top_prototype_frequency(model, dataset.part(args.split), class_filter=group)
    bundle = ExplanationBundle(locals=[], weight_summary=summary, frequency=frequency)
    written = render_reports(bundle, args.out, dataset=dataset)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protogrid",
        description="Channel-specific prototype networks: data, training, evaluation, explanations",
    )
    parser.add_argument("--threads", type=_positive_threads, default=None,
                        help="torch thread count (default: PROTOGRID_THREADS or torch default)")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="write datasets to disk")
    gen.add_argument("--task", default="synthetic-mnist", choices=["synthetic-mnist", "digit-pool"])
    gen.add_argument("--mnist", help="digit source directory (IDX pair or images.pgt/labels.pgt)")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n-total", type=int, default=12000)
    gen.add_argument("--fractions", type=_parse_fractions, default=(0.72, 0.18, 0.10))
    gen.add_argument("--noise-channel", action="store_true",
                     help="append one uniform-noise channel to every sample")
    gen.add_argument("--per-class", type=int, default=700, help="digit-pool images per class")
    gen.add_argument("--distortion", type=float, default=1.0, help="digit-pool style variability")
    gen.set_defaults(func=cmd_generate_data)

    tr = sub.add_parser("train", help="run a training schedule from a config file")
    tr.add_argument("--config", required=True)
    tr.add_argument("--resume", help="checkpoint to warm-start from")
    tr.add_argument("--data", help="override the config's dataset manifest")
    tr.add_argument("--out", help="override the config's output directory")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="metrics for a checkpoint on a dataset")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test", choices=["train", "validation", "test"])
    ev.add_argument("--plus-minus-one", help="adjacency spec such as cyclic:1-8")
    ev.add_argument("--out", help="also write the metrics JSON here")
    ev.set_defaults(func=cmd_evaluate)

    ex = sub.add_parser("explain", help="local explanation for one sample")
    ex.add_argument("--ckpt", required=True)
    ex.add_argument("--data", required=True)
    ex.add_argument("--sample", type=int, required=True)
    ex.add_argument("--split", default="test", choices=["train", "validation", "test"])
    ex.add_argument("--top-k", type=int, default=3)
    ex.add_argument("--out", required=True)
    ex.set_defaults(func=cmd_explain)

    gl = sub.add_parser("global-report", help="model-level weight and frequency report")
    gl.add_argument("--ckpt", required=True)
    gl.add_argument("--data", required=True)
    gl.add_argument("--split", default="test", choices=["train", "validation", "test"])
    gl.add_argument("--class-group", help="comma-separated labels to restrict the frequency table")
    gl.add_argument("--near-zero", type=float, default=1e-3)
    gl.add_argument("--out", required=True)
    gl.set_defaults(func=cmd_global_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    _apply_threads(args)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
