"""``voxfcn`` command line: synth, train, detect, eval, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 data or checkpoint
error, 3 numerical-check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import fcn3d, gradcheck
from .config import Config
from .dataset import load_frame, prepare, scene_ids
from .errors import CheckpointError, MalformedFileError, ParseError, TrainingDivergedError
from .evaluation import Frame as EvalFrame
from .evaluation import evaluate_all
from .inference import detect, read_detections, write_detections
from .synth import write_dataset
from .voxel import voxelize

log = logging.getLogger("voxfcn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--threads", type=int, help="BLAS worker threads (default from config: 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxfcn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic KITTI-format scenes")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, help="overrides synth.seed")

    p = sub.add_parser("train", help="train the network on a KITTI-layout directory")
    _common(p)
    p.add_argument("--data", help="scene directory (velodyne/, label_2/, calib/)")
    p.add_argument("--checkpoint", help="output checkpoint path")
    p.add_argument("--history", help="loss history path (default: <checkpoint>.history.txt)")
    p.add_argument("--epochs", type=int, help="overrides train.epochs")
    p.add_argument("--seed", type=int, help="overrides train.seed")

    p = sub.add_parser("detect", help="run detection on a KITTI-layout directory")
    _common(p)
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--data", help="scene directory")
    p.add_argument("--out", required=True, help="detection output file")
    p.add_argument("--dump-candidates", metavar="PATH", help="also write pre-suppression candidates")

    p = sub.add_parser("eval", help="evaluate a detection file against ground truth")
    _common(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--data", help="ground-truth scene directory")
    p.add_argument("--pr-out", help="write precision/recall dump here")
    p.add_argument("--iou", type=float, help="overrides eval.iou_threshold")

    p = sub.add_parser("gradcheck", help="finite-difference gradient self-test")
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    return parser


def _need(value, what):
    if not value:
        raise ParseError(f"{what} is required (flag or config)")
    return value


def cmd_synth(cfg: Config, args) -> int:
    if args.seed is not None:
        cfg["synth.seed"] = args.seed
    if args.count < 0:
        raise ParseError("--count must be >= 0")
    try:
        ids = write_dataset(args.out, args.count, cfg.scene())
    except OSError as exc:
        print(f"voxfcn synth: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {len(ids)} scenes to {args.out}")
    return EXIT_OK


def _load_training_set(cfg: Config, data_dir):
    grid = cfg.grid()
    scenes = []
    for sid in scene_ids(data_dir):
        frame = load_frame(data_dir, sid)
        scenes.append(prepare(frame, grid, cfg["targets.sphere_radius_fraction"]))
    return scenes


def cmd_train(cfg: Config, args) -> int:
    if args.epochs is not None:
        cfg["train.epochs"] = args.epochs
    if args.seed is not None:
        cfg["train.seed"] = args.seed
    data_dir = Path(_need(args.data or cfg["paths.data"], "--data"))
    ckpt = Path(_need(args.checkpoint or cfg["paths.checkpoint"], "--checkpoint"))
    if not data_dir.is_dir():
        print(f"voxfcn train: data directory {data_dir} not found", file=sys.stderr)
        return EXIT_USAGE
    try:
        scenes = _load_training_set(cfg, data_dir)
    except (OSError, MalformedFileError, ParseError) as exc:
        print(f"voxfcn train: {exc}", file=sys.stderr)
        return EXIT_DATA
    tcfg = cfg.train()
    if tcfg.epochs > 0 and not scenes:
        print(f"voxfcn train: no scenes in {data_dir}", file=sys.stderr)
        return EXIT_DATA
    try:
        if scenes:
            params, history = fcn3d.train(scenes, tcfg, cfg.arch())
        else:
            params, history = fcn3d.init_params(tcfg.seed, cfg.arch()), []
    except TrainingDivergedError as exc:
        print(f"voxfcn train: {exc}", file=sys.stderr)
        return EXIT_DATA
    fcn3d.save_checkpoint(params, ckpt)
    hist_path = Path(args.history) if args.history else ckpt.with_name(ckpt.name + ".history.txt")
    with open(hist_path, "w") as fh:
        fh.write("# epoch objectness box total\n")
        for e in history:
            fh.write(f"{e.epoch} {e.objectness:.9g} {e.box:.9g} {e.total:.9g}\n")
    print(f"checkpoint {ckpt}, history {hist_path}")
    return EXIT_OK


def cmd_detect(cfg: Config, args) -> int:
    data_dir = Path(_need(args.data or cfg["paths.data"], "--data"))
    ckpt = _need(args.checkpoint or cfg["paths.checkpoint"], "--checkpoint")
    try:
        params = fcn3d.load_checkpoint(ckpt)
    except (OSError, CheckpointError) as exc:
        print(f"voxfcn detect: {exc}", file=sys.stderr)
        return EXIT_DATA
    if params.arch != cfg.arch():
        print(f"voxfcn detect: checkpoint architecture {params.arch} does not match config {cfg.arch()}",
              file=sys.stderr)
        return EXIT_DATA
    grid, icfg = cfg.grid(), cfg.inference()
    kept_all, cand_all = {}, {}
    try:
        for sid in scene_ids(data_dir):
            frame = load_frame(data_dir, sid, with_labels=False)
            maps, _ = fcn3d.forward(voxelize(frame.cloud, grid), params)
            _, scored, kept = detect(maps, grid, icfg)
            kept_all[sid] = kept
            cand_all[sid] = scored
            log.info("%s: %d candidates, %d detections", sid, len(scored), len(kept))
    except (OSError, MalformedFileError, ParseError) as exc:
        print(f"voxfcn detect: {exc}", file=sys.stderr)
        return EXIT_DATA
    write_detections(args.out, kept_all)
    if args.dump_candidates:
        write_detections(args.dump_candidates, cand_all)
    print(f"{sum(map(len, kept_all.values()))} detections in {len(kept_all)} scenes -> {args.out}")
    return EXIT_OK


def cmd_eval(cfg: Config, args) -> int:
    if args.iou is not None:
        cfg["eval.iou_threshold"] = args.iou
    data_dir = Path(_need(args.data or cfg["paths.data"], "--data"))
    try:
        dets = read_detections(args.detections)
        ids = scene_ids(data_dir)
        known = set(ids)
        unknown = sorted(set(dets) - known)
        for sid in unknown:
            print(f"voxfcn eval: warning: detections for unknown scene {sid} skipped", file=sys.stderr)
        if dets and len(unknown) == len(dets):
            print("voxfcn eval: no detection scene matches the ground truth", file=sys.stderr)
            return EXIT_DATA
        frames = []
        for sid in ids:
            frame = load_frame(data_dir, sid)
            frames.append(EvalFrame(sid, dets.get(sid, []), frame.labels, frame.calib))
    except (OSError, MalformedFileError, ParseError) as exc:
        print(f"voxfcn eval: {exc}", file=sys.stderr)
        return EXIT_DATA
    report = evaluate_all(
        frames, cfg["eval.iou_threshold"], cfg["eval.metrics"], cfg["eval.difficulty_mode"]
    )
    print(report.format_table())
    if args.pr_out:
        Path(args.pr_out).write_text(report.pr_dump())
    return EXIT_OK


def cmd_gradcheck(cfg: Config, args) -> int:
    results = gradcheck.run(
        seed=args.seed,
        grid_dims=cfg["gradcheck.grid"],
        arch=cfg.arch(),
        step=cfg["gradcheck.step"],
        n_coords=cfg["gradcheck.coords"],
        inject_fault=args.inject_fault,
    )
    threshold = cfg["gradcheck.threshold"]
    ok = True
    for name, err in results.items():
        flag = "ok" if err < threshold else "FAIL"
        ok &= err < threshold
        print(f"{name:<28} max rel err {err:.3e}  {flag}")
    print("gradcheck passed" if ok else f"gradcheck FAILED (threshold {threshold:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = Config.load(args.config, args.overrides)
    except (OSError, ParseError) as exc:
        print(f"voxfcn: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    threads = args.threads if args.threads is not None else cfg["runtime.threads"]
    try:
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](cfg, args)
    except (ParseError, ValueError) as exc:
        print(f"voxfcn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
