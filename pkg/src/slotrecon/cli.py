"""Command line entry point: ``slotrecon {synth,train,eval,baseline-blocks,plot}``.

Exit codes: 0 success, 2 usage/configuration error, 3 data or format error,
4 numerical failure. Set ``SLOTRECON_VERBOSE=1`` for debug logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .errors import ConfigError, SlotReconError

log = logging.getLogger("slotrecon")


def _load_config_file(path) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None


def _merge(cls, file_cfg: dict, args: argparse.Namespace, section: str | None = None):
    """Flags override the config file, which overrides the dataclass defaults."""
    names = {f.name for f in fields(cls)}
    base = file_cfg.get(section, file_cfg) if section else file_cfg
    merged = {k: v for k, v in base.items() if k in names}
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    return cls(**merged)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    from .data import SynthConfig, generate_synthetic_dataset

    if args.objects:
        args.min_objects, args.max_objects = args.objects
    if args.sizes:
        args.min_size, args.max_size = args.sizes
    cfg = _merge(SynthConfig, _load_config_file(args.config), args, "synth")
    manifest = generate_synthetic_dataset(cfg, args.out)
    n_eval = sum(1 for s in manifest.splits.values() if s == "eval")
    print(json.dumps({
        "out": str(args.out), "n_samples": manifest.n_samples, "n_eval": n_eval,
        "grid": manifest.grid, "feature_dim": manifest.feature_dim, "image_size": manifest.image_size,
        "classes": len(manifest.classes), "seed": cfg.seed, "noise_std": cfg.noise_std,
    }))
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    from .data import load_dataset
    from .training import TrainConfig, load_checkpoint, load_training_data, train

    file_cfg = _load_config_file(args.config)
    if args.resume:
        state = load_checkpoint(args.resume)
        overrides = {"steps": args.steps} if args.steps is not None else {}
        cfg = TrainConfig(**{**asdict(state.cfg), **overrides})
        state.cfg = cfg
    else:
        state = None
        cfg = _merge(TrainConfig, file_cfg, args, "train")

    dataset = load_dataset(args.data, split="train", with_images=True)
    data = load_training_data(cfg, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out / "train_log.jsonl"
    mode = "a" if args.resume else "w"
    with open(log_path, mode) as log_fh:
        header = {"event": "config", **asdict(cfg), "resumed_from": state.step if state else 0}
        print(json.dumps(header), flush=True)

        def on_step(stats):
            record = {"step": stats["step"], "lr": stats["lr"], "loss": stats["loss"]}
            log_fh.write(json.dumps(record) + "\n")
            if args.print_every and stats["step"] % args.print_every == 0:
                print(json.dumps({**record, "grad_norm": stats["grad_norm"]}), flush=True)

        state = train(cfg, data=data, state=state, checkpoint_dir=out, on_step=on_step)
    if args.figures:
        from .plotting import plot_loss_curve, read_log

        Path(args.figures).mkdir(parents=True, exist_ok=True)
        records = read_log(log_path)
        if records:
            plot_loss_curve(records, Path(args.figures) / "loss.png")
    print(json.dumps({"event": "done", "step": state.step, "checkpoint": str(out),
                      "final_loss": state.loss_trace[-1] if state.loss_trace else None}))
    return 0


# ---------------------------------------------------------------------------
# eval / baseline


def _write_report(report, args) -> None:
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(json.dumps({"task": report.task, **report.metrics}))


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluation import evaluate, run_inference
    from .training import load_checkpoint, load_training_data

    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, split=args.split)
    report = evaluate(state, dataset, args.task, args.mask_source, args.seed, args.threshold,
                      args.clusters, args.restarts, args.repeats, args.slots)
    report.settings.update({"checkpoint": str(args.checkpoint), "data": str(args.data)})
    _write_report(report, args)
    if args.figures:
        from .plotting import write_eval_figures

        _, arrays = load_training_data(state.cfg, dataset)
        inf = run_inference(state, arrays, report.settings["mask_source"], args.seed, args.slots)
        write_eval_figures(args.figures, inf.labels, list(dataset), prefix=args.task)
    return 0


def cmd_baseline_blocks(args) -> int:
    from .data import load_dataset
    from .evaluation import evaluate_block_pattern
    from .masks import block_columns

    dataset = load_dataset(args.data, split=args.split)
    report = evaluate_block_pattern(dataset, args.task, args.masks, args.threshold, args.clusters,
                                    args.restarts, args.repeats, args.seed)
    report.settings.update({"columns": block_columns(args.masks), "data": str(args.data), "tag": "baseline"})
    _write_report(report, args)
    if args.figures:
        from .masks import block_pattern
        from .plotting import write_eval_figures

        h, w = dataset.manifest.image_size
        samples = list(dataset)
        write_eval_figures(args.figures, [block_pattern(args.masks, h, w)] * len(samples), samples,
                           prefix=f"blocks{args.masks}")
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_loss_curve, plot_metric_comparison, read_log

    if args.log:
        plot_loss_curve(read_log(args.log), args.out)
    else:
        reports = {}
        for item in args.reports:
            name, _, path = item.partition("=")
            reports[name] = json.loads(Path(path or name).read_text())["metrics"]
        plot_metric_comparison(reports, args.out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slotrecon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", dest="n_samples", type=int)
    p.add_argument("--n-eval", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--objects", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--sizes", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--noise-std", type=float)
    p.add_argument("--no-images", dest="render_images", action="store_const", const=False)
    p.add_argument("--unaligned", dest="align_to_patches", action="store_const", const=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train grouping + decoder on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--config")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--log", help="line-delimited JSON loss log (default: OUT/train_log.jsonl)")
    p.add_argument("--figures", help="directory for the loss-curve figure")
    p.add_argument("--print-every", type=int, default=100)
    for flag, name, typ in [
        ("--steps", "steps", int), ("--batch-size", "batch_size", int), ("--peak-lr", "peak_lr", float),
        ("--warmup-steps", "warmup_steps", int), ("--decay-half-life", "decay_half_life", int),
        ("--grad-clip", "grad_clip_norm", float), ("--slots", "n_slots", int), ("--iters", "n_iters", int),
        ("--decoder", "decoder", str), ("--target-scale", "target_scale", float), ("--seed", "seed", int),
        ("--slot-dim", "slot_dim", int), ("--mlp-hidden", "mlp_hidden", int), ("--tf-layers", "tf_layers", int),
        ("--tf-heads", "tf_heads", int), ("--pixel-size", "pixel_size", int),
        ("--pixel-hidden", "pixel_hidden", int), ("--encoder", "encoder", str),
        ("--grid-code-scale", "grid_code_scale", float), ("--checkpoint-every", "checkpoint_every", int),
    ]:
        p.add_argument(flag, dest=name, type=typ)
    p.set_defaults(func=cmd_train)

    def eval_args(p):
        p.add_argument("--data", required=True)
        p.add_argument("--task", choices=("discovery", "localization", "segmentation"), default="discovery")
        p.add_argument("--split", default="eval")
        p.add_argument("--out", help="MetricsReport JSON path")
        p.add_argument("--figures", help="directory for overlay PNGs and the mask grid")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threshold", type=float, default=0.5)
        p.add_argument("--clusters", type=int)
        p.add_argument("--restarts", type=int, default=20)
        p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a task protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask-source", choices=("mlp-alpha", "decoder-attention", "slot-attention"))
    p.add_argument("--slots", type=int)
    eval_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline-blocks", help="evaluate the block-pattern baseline")
    p.add_argument("--masks", type=int, required=True)
    eval_args(p)
    p.set_defaults(func=cmd_baseline_blocks)

    p = sub.add_parser("plot", help="render a loss log or compare metric reports")
    p.add_argument("--out", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--log")
    group.add_argument("--reports", nargs="+", metavar="NAME=REPORT.json")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.DEBUG if os.environ.get("SLOTRECON_VERBOSE") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SlotReconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
