"""Command-line entry point.

Subcommands:
  synth      write a synthetic dataset directory
  train      run the two-phase schedule, logging one line per epoch
  eval       print "AP AP50 AP75" for a checkpoint on the test split
  infer      write per-frame detections for one video (--mode shuffle|full)
  bench      print fps_full, fps_shuffle and their ratio
  gradcheck  run the float64 gradient suite (nonzero exit on failure)
  oracle     run the brute-force equivalence suites (nonzero exit on failure)

Configuration comes from --preset, then --config (key=value file), then
--set key=value flags, in increasing priority. `--dump-config` prints the
resolved configuration and exits. STDA_SEED serves as a seed fallback when
neither flags nor config set one.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import (RunConfig, apply_overrides, dump_config, env_seed_fallback,
                     read_config_file)
from .inference import bench_compare, evaluate_dataset, full_infer, shuffle_infer
from .numerics import InputError, make_rng
from .synthdata import generate_dataset, read_dataset, write_dataset
from .train import train_run
from .transformer import init_net, load_checkpoint
from .verification import run_gradient_suite, run_oracle_suite


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--preset", choices=("paper", "toy"), default="paper",
                   help="base defaults before config/flags are applied")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    p.add_argument("--seed", type=int, help="run seed (overrides config and STDA_SEED)")
    p.add_argument("--dump-config", action="store_true",
                   help="print the resolved configuration and exit")


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.toy() if args.preset == "toy" else RunConfig()
    overrides: dict[str, str] = {}
    if args.config:
        overrides.update(read_config_file(args.config))
    for item in args.set:
        if "=" not in item:
            raise InputError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, val = item.partition("=")
        overrides[key.strip()] = val.strip()
    seed_in_overrides = "seed" in overrides
    cfg = apply_overrides(cfg, overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    elif not seed_in_overrides:
        env = env_seed_fallback()
        if env is not None:
            cfg.seed = env
    cfg.validate()
    return cfg


def _load_data(cfg: RunConfig, path: str | None):
    data_dir = path or cfg.data_dir
    return read_dataset(data_dir)


def _load_net(cfg: RunConfig, checkpoint: str | None):
    net_cfg = cfg.net_config()
    net = init_net(net_cfg, make_rng(cfg.seed, 0x11E7), cfg.dtype())
    if checkpoint:
        load_checkpoint(checkpoint, net)
    return net_cfg, net


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    n_videos = args.videos if args.videos is not None else cfg.train_videos + cfg.test_videos
    ds = generate_dataset(cfg.seed, n_videos, cfg.height, cfg.width,
                          cfg.video_frames, cfg.difficulty)
    out = args.out or cfg.data_dir
    write_dataset(ds, out)
    print(f"wrote {n_videos} videos to {out} (seed={cfg.seed}, difficulty={cfg.difficulty})")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds = _load_data(cfg, args.data)
    out_dir = args.out or cfg.out_dir
    train_run(cfg, ds, out_dir=out_dir)
    print(f"final checkpoint: {os.path.join(out_dir, 'final.stn1')}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    ds = _load_data(cfg, args.data)
    net_cfg, net = _load_net(cfg, args.checkpoint)
    _, test_videos = ds.split(cfg.train_videos)
    mode = "shuffle" if net_cfg.frames == 6 else "full"
    ap, ap50, ap75 = evaluate_dataset(net_cfg, net, test_videos, mode=mode)
    print(f"{ap:.4f} {ap50:.4f} {ap75:.4f}")
    return 0


def cmd_infer(args) -> int:
    cfg = resolve_config(args)
    ds = _load_data(cfg, args.data)
    net_cfg, net = _load_net(cfg, args.checkpoint)
    if not 0 <= args.video < len(ds.videos):
        raise InputError(f"infer: video {args.video} out of range")
    video = ds.videos[args.video]
    lines = []
    if args.mode == "shuffle":
        dets = shuffle_infer(net_cfg, net, video, args.center)
        frames = [args.center - 1, args.center, args.center + 1]
    else:
        dets = [full_infer(net_cfg, net, video, args.center)]
        frames = [args.center]
    from .detection import scored_detections
    for frame, det in zip(frames, dets):
        scores, labels, boxes = scored_detections(det)
        for i in range(len(scores)):
            if scores[i] < args.min_score:
                continue
            cx, cy, w, h = boxes[i]
            lines.append(f"frame={frame} query={i} class={int(labels[i])} "
                         f"score={scores[i]:.4f} box={cx:.4f} {cy:.4f} {w:.4f} {h:.4f}")
    report = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(report)
        print(f"wrote {len(lines)} detections to {args.out}")
    else:
        sys.stdout.write(report)
    return 0


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    if args.data:
        ds = read_dataset(args.data)
        videos = ds.videos
    else:
        videos = generate_dataset(cfg.seed, 2, cfg.height, cfg.width,
                                  cfg.video_frames, cfg.difficulty).videos
    net_cfg, net = _load_net(cfg, args.checkpoint)
    result = bench_compare(net_cfg, net, videos, n_triples=args.triples,
                           repeats=args.repeats)
    print(f"fps_full={result.fps_full:.3f} fps_shuffle={result.fps_shuffle:.3f} "
          f"ratio={result.ratio:.3f}")
    return 0


def _report_suite(results, kind: str) -> int:
    failed = 0
    worst = 0.0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{kind} {r.name}: err {r.error:.3e} (tol {r.tolerance:.0e}) {status}")
        worst = max(worst, r.error)
        failed += 0 if r.passed else 1
    print(f"{kind}: {len(results) - failed}/{len(results)} passed, "
          f"max err {worst:.3e} {'PASS' if failed == 0 else 'FAIL'}")
    return 0 if failed == 0 else 1


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    return _report_suite(run_gradient_suite(cfg.seed), "gradcheck")


def cmd_oracle(args) -> int:
    cfg = resolve_config(args)
    return _report_suite(run_oracle_suite(cfg.seed), "oracle")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stnet", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--out", help="output directory (default: data_dir)")
    p.add_argument("--videos", type=int, help="number of videos (default: train+test)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the two-phase training schedule")
    _add_config_flags(p)
    p.add_argument("--data", help="dataset directory (default: data_dir)")
    p.add_argument("--out", help="output directory (default: out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_config_flags(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write detections for one video")
    _add_config_flags(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", type=int, default=0)
    p.add_argument("--center", type=int, default=1, help="center frame k")
    p.add_argument("--mode", choices=("shuffle", "full"), default="shuffle")
    p.add_argument("--min-score", type=float, default=0.5)
    p.add_argument("--out", help="report file (default: stdout)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="compare full vs shuffle inference speed")
    _add_config_flags(p)
    p.add_argument("--data", help="dataset directory (default: generate two videos)")
    p.add_argument("--checkpoint")
    p.add_argument("--triples", type=int, default=10)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="run the float64 gradient suite")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle", help="run the brute-force oracle suites")
    _add_config_flags(p)
    p.set_defaults(func=cmd_oracle)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "dump_config", False):
            sys.stdout.write(dump_config(resolve_config(args)))
            return 0
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
