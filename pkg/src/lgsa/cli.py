"""Command-line entry point: ``lgsa <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PRESETS, ConfigError, TrainConfig, dump_config, load_config
from .network import ATTENTION_MODES
from .pnm import read_pnm
from .synth import DISTRIBUTIONS, generate_dataset, load_dataset, save_dataset


class CliError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser, attention: bool = True) -> None:
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    if attention:
        p.add_argument("--attention", choices=ATTENTION_MODES, help="fusion mode (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lgsa", description="Dense object counting with grouped attention.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--distribution", choices=DISTRIBUTIONS, default="uniform")
    p.add_argument("--n-images", type=int, default=100)
    p.add_argument("--count-min", type=int)
    p.add_argument("--count-max", type=int)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--occlusion", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="dataset directory")

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p.add_argument("--data", type=Path, help="dataset directory (overrides dataset_root)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--out", type=Path, help="output directory (overrides checkpoint_dir)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common(p, attention=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", type=Path, help="report path (default: <checkpoint dir>/eval_<split>.json)")

    p = sub.add_parser("infer", help="detect and count objects in PPM images")
    _add_common(p, attention=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("images", type=Path, nargs="+")
    p.add_argument("--out", type=Path, help="write detections as JSON here (default: stdout)")

    p = sub.add_parser("visualize", help="render prediction maps, similarity matrices and overlays")
    _add_common(p, attention=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", type=Path, help="a PPM image")
    src.add_argument("--data", type=Path, help="dataset directory; use with --index")
    p.add_argument("--index", type=int, default=0, help="dataset entry to render")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("selftest", help="run gradient checks and oracle suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full", action="store_true", help="100 cases per op instead of 3")
    return parser


def resolve_config(args, base: TrainConfig | None = None) -> TrainConfig:
    """Preset or ``base``, then the config file, then individual flags."""
    if getattr(args, "preset", None):
        base = TrainConfig(**PRESETS[args.preset])
    base = base or TrainConfig()
    cfg = load_config(args.config, base) if args.config else base
    changes = {}
    for flag, key in (("seed", "seed"), ("attention", "attention"), ("epochs", "epochs"), ("max_steps", "max_steps")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    if getattr(args, "data", None) is not None:
        changes["dataset_root"] = str(args.data)
    if getattr(args, "out", None) is not None:
        changes["checkpoint_dir"] = str(args.out)
    return cfg.replace(**changes)


def _overrides(args) -> dict:
    """Decoding settings a config file may change at evaluation time."""
    out = {}
    if args.config:
        cfg = load_config(args.config)
        out.update(score_threshold=cfg.score_threshold, top_k=cfg.top_k)
    return out


def cmd_gen_data(args, out) -> int:
    count_range = None
    if args.count_min is not None or args.count_max is not None:
        if args.count_min is None or args.count_max is None:
            raise CliError("--count-min and --count-max go together")
        count_range = (args.count_min, args.count_max)
    manifest = generate_dataset(
        args.distribution, args.n_images, count_range, args.seed,
        image_size=args.image_size, occlusion=args.occlusion,
    )
    save_dataset(manifest, args.out)
    out(f"wrote {len(manifest)} images to {args.out} "
        f"({len(manifest.split('train'))} train / {len(manifest.split('test'))} test)")
    return 0


def cmd_train(args, out) -> int:
    from .train import train

    base = None
    if args.resume is not None:
        from .checkpoint import load_checkpoint

        base = load_checkpoint(args.resume).config
    cfg = resolve_config(args, base)
    run_dir = Path(cfg.checkpoint_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(dump_config(cfg))
    res = train(cfg, resume=args.resume, out_dir=run_dir)
    last = res.log_records[-1] if res.log_records else {}
    out(f"trained to step {res.checkpoint.step}; final checkpoint {run_dir / 'final.ckpt'}")
    if "loss" in last:
        out(f"last epoch loss {last['loss']:.4f}")
    return 0


def cmd_eval(args, out) -> int:
    from .train import evaluate

    report_path = args.out or args.checkpoint.parent / f"eval_{args.split}.json"
    overrides = _overrides(args)
    rep = evaluate(args.checkpoint, args.data, args.split, report_path, overrides)
    out(f"{args.split}: MAE {rep.mae:.4f}  RMSE {rep.rmse:.4f}  AP {rep.ap:.4f}  ({len(rep.gt_counts)} images)")
    out(f"report written to {report_path}")
    return 0


def cmd_infer(args, out) -> int:
    from .train import net_from_checkpoint, predict

    net, cfg = net_from_checkpoint(args.checkpoint)
    ov = _overrides(args)
    if ov:
        cfg = cfg.replace(**ov)
    images = [read_pnm(p) for p in args.images]
    for p, img in zip(args.images, images):
        if img.ndim != 3:
            raise CliError(f"{p}: expected a colour (P6) image")
    preds = predict(net, images, cfg, batch_size=1)
    body = [
        {
            "image": str(p),
            "count": len(pr.detections),
            "detections": [
                {"cx": d.cx, "cy": d.cy, "w": d.w, "h": d.h, "score": d.score, "class_id": d.class_id}
                for d in pr.detections
            ],
        }
        for p, pr in zip(args.images, preds)
    ]
    text = json.dumps(body, indent=2) + "\n"
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
        for item in body:
            out(f"{item['image']}: {item['count']}")
    else:
        out(text.rstrip("\n"))
    return 0


def cmd_visualize(args, out) -> int:
    from .train import net_from_checkpoint
    from .visualize import visualize

    net, cfg = net_from_checkpoint(args.checkpoint)
    ov = _overrides(args)
    if ov:
        cfg = cfg.replace(**ov)
    ann = None
    if args.image is not None:
        image = read_pnm(args.image)
    else:
        manifest = load_dataset(args.data)
        if not 0 <= args.index < len(manifest):
            raise CliError(f"--index {args.index} out of range for {len(manifest)} entries")
        entry = manifest.entries[args.index]
        image, ann = entry.load_image(args.data), entry.annotation
    res = visualize(net, cfg, image, args.out, ann)
    out(f"wrote {len(res.files)} files to {args.out}")
    out(f"predicted {res.num_detections}" + ("" if ann is None else f", ground truth {res.num_ground_truth}"))
    if not np.isnan(res.contrast_pam):
        out(f"heatmap contrast raw {res.contrast_raw:.4f}, after pixel attention {res.contrast_pam:.4f}")
    return 0


def cmd_selftest(args, out) -> int:
    from .selftest import main as selftest_main

    return selftest_main(quick=not args.full, seed=args.seed, out=out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "visualize": cmd_visualize,
    "selftest": cmd_selftest,
}


def main(argv=None, out=print) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 and usage text on bad input
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, out)
    except (CliError, ConfigError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"lgsa {args.command}: error: {exc}", file=sys.stderr)
        return 1
