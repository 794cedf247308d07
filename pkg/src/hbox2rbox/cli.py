"""Command-line entry point: ``hbox2rbox {synth,train,convert,eval}``."""
import argparse
import json
import logging
import math
import os
import sys

from . import evalio, synth, trainer
from .abbs import ScaleGrid
from .errors import GenerationError, InvalidArgumentError, NumericFailureError, ParseError
from .losses import LossWeights

log = logging.getLogger("hbox2rbox")

DET_SUFFIX = ".det.txt"
RBOX_SUFFIX = ".rbox.txt"


def _on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _topk(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError("top-k must be positive")
    if v <= 1.0 and "." in text:
        return v
    if v != int(v):
        raise argparse.ArgumentTypeError("a count must be an integer; a fraction needs a decimal point and must be <= 1")
    return int(v)


def _classes(text):
    return tuple(c for c in text.split(",") if c)


def build_parser():
    parser = argparse.ArgumentParser(prog="hbox2rbox", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes with annotations")
    p.add_argument("--n-scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--shapes", type=_classes, default=synth.SceneConfig().kinds,
                   help="comma-separated shape kinds (%(default)s)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="recover rotated boxes from horizontal-box supervision")
    p.add_argument("--data", required=True, help="directory written by 'synth'")
    p.add_argument("--supervision", choices=("t", "c"), default="t")
    p.add_argument("--abbs", type=_on_off, default=True)
    p.add_argument("--spa", type=_on_off, default=True)
    p.add_argument("--scale-min", type=float, default=None)
    p.add_argument("--scale-max", type=float, default=None)
    p.add_argument("--scale-step", type=float, default=None)
    p.add_argument("--iters", type=int, default=trainer.TrainConfig.iters)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rotation", type=float, default=None, help="fixed view rotation in radians (default: uniform)")
    p.add_argument("--spa-topk", type=_topk, default=trainer.TrainConfig.spa_topk,
                   help="symmetric proposals per scene for the symmetry loss: a fraction in (0, 1] or a count")
    p.add_argument("--spa-grid", type=int, default=trainer.TrainConfig.spa_grid)
    p.add_argument("--snap-period", type=float, default=trainer.TrainConfig.snap_period)
    p.add_argument("--reg-theta-grad", action="store_true", help="let the regression loss drive theta too")
    p.add_argument("--config", help="JSON file of loss weights")
    p.add_argument("--out", required=True, help="per-step loss records (JSON lines)")
    p.add_argument("--predictions", help="directory for final boxes as detection files, one <scene>.det.txt per scene")
    p.add_argument("--results", help="write per-object results (JSON lines)")

    p = sub.add_parser("convert", help="convert rotated-box annotations to horizontal boxes")
    p.add_argument("--mode", choices=("rbox2chbox", "rbox2thbox-mask"), required=True)
    p.add_argument("--in", dest="src", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score detections against rotated-box ground truth")
    p.add_argument("--pred", required=True, help="detection file, or a directory of <scene>.det.txt files")
    p.add_argument("--gt", required=True, help="rbox annotation file, or a directory of <scene>.rbox.txt files")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--subset", type=_classes, default=evalio.DEFAULT_SUBSET)
    p.add_argument("--out", help="append the report as one JSON line")
    return parser


def cmd_synth(args):
    cfg = synth.SceneConfig(size=args.size, kinds=tuple(args.shapes))
    for kind in cfg.kinds:
        if kind not in synth.SHAPE_KINDS:
            raise InvalidArgumentError(f"unknown shape kind {kind!r}; choose from {', '.join(synth.SHAPE_KINDS)}")
    os.makedirs(args.out, exist_ok=True)
    scenes = synth.generate_dataset(args.n_scenes, args.seed, cfg)
    n_obj = 0
    for i, scene in enumerate(scenes):
        evalio.write_scene(args.out, i, scene, cfg.supersample)
        n_obj += len(scene.objects)
        log.info("scene %d: %d objects", i, len(scene.objects))
    print(f"wrote {len(scenes)} scenes ({n_obj} objects) to {args.out}")


def _train_config(args):
    base = trainer.TrainConfig()
    grid = base.grid if args.supervision == "t" else trainer.COARSE_GRID
    if any(v is not None for v in (args.scale_min, args.scale_max, args.scale_step)):
        lo = args.scale_min if args.scale_min is not None else grid.s_min
        hi = args.scale_max if args.scale_max is not None else grid.s_max
        step = args.scale_step if args.scale_step is not None else grid.step
        grid = ScaleGrid.from_step(lo, hi, step)
    weights = LossWeights()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            weights = LossWeights.from_dict(json.load(fh))
    return trainer.TrainConfig(
        supervision="t_hbox" if args.supervision == "t" else "c_hbox",
        grid=grid,
        weights=weights,
        iters=args.iters,
        R_sampler="uniform" if args.rotation is None else args.rotation,
        enable_abbs=args.abbs,
        enable_spa=args.spa,
        seed=args.seed,
        spa_topk=args.spa_topk,
        spa_grid=args.spa_grid,
        reg_theta_grad=args.reg_theta_grad,
        snap_period=args.snap_period,
    )


def cmd_train(args):
    cfg = _train_config(args)
    scenes = evalio.load_scene_dir(args.data)
    data = trainer.prepare(scenes, cfg.supervision, cfg.supersample)
    log.info("training on %d objects from %d scenes", len(data), len(scenes))
    with open(args.out, "w", encoding="utf-8") as fh:
        report = trainer.run(cfg, data, on_step=lambda it, b: trainer.write_step_log(fh, it, b))
    if args.results:
        with open(args.results, "w", encoding="utf-8") as fh:
            for rec in report.to_records():
                fh.write(json.dumps(rec) + "\n")
    if args.predictions:
        os.makedirs(args.predictions, exist_ok=True)
        dets = trainer.detections(report, data)
        for si, stem in enumerate(evalio.scene_stems(args.data)):
            mine = [d for d, s in zip(dets, data.scene_index) if s == si]
            evalio.write_detection_file(os.path.join(args.predictions, stem + DET_SUFFIX), mine)
    for k, v in report.summary().items():
        print(f"{k}: {v:.6f}" if isinstance(v, float) else f"{k}: {v}")


def cmd_convert(args):
    records = evalio.read_rbox_file(args.src)
    if args.mode == "rbox2chbox":
        out = evalio.convert_rbox_to_chbox(records)
    else:
        out = evalio.convert_rbox_to_thbox(records)
    evalio.write_hbox_file(args.out, out)
    print(f"converted {len(out)} records")


def _eval_images(pred, gt):
    if not os.path.isdir(gt):
        if os.path.isdir(pred):
            raise InvalidArgumentError("--pred is a directory but --gt is a file")
        return [(evalio.read_detection_file(pred), evalio.read_rbox_file(gt))]
    if not os.path.isdir(pred):
        raise InvalidArgumentError("--gt is a directory, so --pred must be one too")
    stems = sorted(f[: -len(RBOX_SUFFIX)] for f in os.listdir(gt) if f.endswith(RBOX_SUFFIX))
    if not stems:
        raise InvalidArgumentError(f"no *{RBOX_SUFFIX} files in {gt}")
    images = []
    for stem in stems:
        det_path = os.path.join(pred, stem + DET_SUFFIX)
        preds = evalio.read_detection_file(det_path) if os.path.exists(det_path) else []
        images.append((preds, evalio.read_rbox_file(os.path.join(gt, stem + RBOX_SUFFIX))))
    return images


def cmd_eval(args):
    report = evalio.ap50_images(_eval_images(args.pred, args.gt), args.iou, args.subset)
    sys.stdout.write(report.format())
    if args.out:
        with open(args.out, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(report.to_dict(), allow_nan=True) + "\n")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "convert": cmd_convert, "eval": cmd_eval}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ParseError, InvalidArgumentError, GenerationError, NumericFailureError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
