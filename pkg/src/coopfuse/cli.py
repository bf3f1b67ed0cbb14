"""Command line interface.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .harness import cav_sweep, evaluate_strategy, render_bev, write_sweep_csv
from .nn import load_checkpoint, load_into
from .pipeline import CoopModel, PipelineConfig, payload_report, run_strategy
from .sim import FrameFormatError, PlacementError, SceneConfig, SensorModel, generate_frames, read_frames, write_frames
from .tensor import NonFiniteError
from .trainer import DivergenceError, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path) as fh:
        return PipelineConfig.from_json(fh.read())


def _load_model(ckpt_path: str) -> CoopModel:
    arrays, extra = load_checkpoint(ckpt_path)
    config = PipelineConfig.from_json(extra["config"])
    model = CoopModel(config)
    load_into(model, arrays)
    model.set_training(False)
    return model


def _cmd_gen_data(args) -> int:
    config = _load_config(args.config)
    # scenes carry at least n_max CAVs so every fusion group size is reachable
    scene_cfg = SceneConfig(n_cavs=max(args.cavs, config.n_max, 1))
    sensor = SensorModel(azimuth_resolution=np.deg2rad(args.azimuth_deg), rings=args.rings)
    frames = generate_frames(scene_cfg, sensor, seed=args.seed, n_frames=args.frames)
    write_frames(frames, args.out)
    print(f"wrote {len(frames)} frames to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    frames = read_frames(args.data)
    n_val = max(1, len(frames) // 5) if len(frames) > 1 else 0
    train_frames, val_frames = frames[: len(frames) - n_val], frames[len(frames) - n_val :]
    model = CoopModel(config, seed=config.train.seed)
    log = train(model, train_frames, val_frames, checkpoint_path=args.out)
    print(f"trained {len(log.train_loss)} epochs; best val epoch {log.best_epoch}")
    print(f"final train loss {log.train_loss[-1]:.6f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    frames = read_frames(args.data)
    report = evaluate_strategy(model, frames, args.strategy, use_3d=args.iou_3d)
    with open(args.report, "w") as fh:
        fh.write(report.to_json() + "\n")
    if args.pr_csv:
        report.write_pr_csv(args.pr_csv)
    for cls, per_iou in sorted(report.ap.items()):
        for iou, ap in sorted(per_iou.items()):
            print(f"{cls} AP@{iou}: {ap:.4f}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    model = _load_model(args.ckpt)
    frames = read_frames(args.data)
    lo, hi = (int(v) for v in args.k.split(".."))
    rows = cav_sweep(model, frames, list(range(lo, hi + 1)))
    write_sweep_csv(rows, args.out)
    print(f"wrote sweep ({lo}..{hi}) to {args.out}")
    return EXIT_OK


def _cmd_render(args) -> int:
    model = _load_model(args.ckpt)
    frames = read_frames(args.data)
    matches = [f for f in frames if f.frame_id == args.frame]
    if not matches:
        print(f"frame {args.frame} not found", file=sys.stderr)
        return EXIT_DATA
    frame = matches[0]
    from . import tensor

    with tensor.no_grad():
        dets = run_strategy(model, frame, args.strategy)
    render_bev(frame, dets, args.out)
    print(f"rendered frame {args.frame} to {args.out}")
    return EXIT_OK


def _cmd_payload(args) -> int:
    config = _load_config(args.config)
    frames = read_frames(args.data)
    reports = [payload_report(f, config) for f in frames]
    print(json.dumps(reports, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coopfuse", description="Cooperative LiDAR perception at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic multi-CAV frames")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--cavs", type=int, default=3)
    p.add_argument("--azimuth-deg", type=float, default=0.5)
    p.add_argument("--rings", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", required=True, choices=["none", "early", "late", "max", "avg", "s_ada", "c_3d", "c_ada"])
    p.add_argument("--report", required=True)
    p.add_argument("--pr-csv", default=None)
    p.add_argument("--iou-3d", action="store_true")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("sweep", help="AP versus number of CAVs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", required=True, help="range, e.g. 1..3")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("render", help="render a frame to SVG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--strategy", default="none", choices=["none", "early", "late", "max", "avg", "s_ada", "c_3d", "c_ada"])
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_render)

    p = sub.add_parser("payload", help="per-strategy communication payload report")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=_cmd_payload)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return err.code if isinstance(err.code, int) else EXIT_USAGE
    try:
        return args.fn(args)
    except (FrameFormatError, PlacementError, FileNotFoundError, KeyError, ValueError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, DivergenceError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
