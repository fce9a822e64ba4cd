# Licensed under the MIT license. See LICENSE.md file in the project root for full license information.

"""
Command-line entry point: python -m lifseg <command> [flags].

Commands: gen, project, paint, train, eval, ablate, formats.
Exit codes: 0 success, 2 usage, 3 data, 4 runtime. Failures print one line
    lifseg-error code=<n> kind=<ExceptionName> message=<json-quoted message>
on stderr.
"""

import argparse
import concurrent.futures
import csv
import json
import logging
import os
import sys
from functools import partial

import numpy as np

from lifseg import dataio, pipeline, synthetic
from lifseg.config import (ABLATION_VARIANTS, DEFAULT_CLASS_NAMES, PipelineConfig, load_project_config,
                           normalize_variant)
from lifseg.context_fusion import paint
from lifseg.errors import DATA_ERRORS
from lifseg.geometry import project_bundle
from lifseg.logging_setup import setup_logging

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

ABLATION_TABLE = "ablation.csv"


class UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="lifseg",
        description="LiDAR-camera fusion segmentation with offset rectification, at desk scale"
    )
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_ArgumentParser)
    sub.required = True

    gen = sub.add_parser("gen", help="Generate a synthetic dataset")
    gen.add_argument("--out", required=True, help="Output dataset directory")
    gen.add_argument("--frames", type=int, default=50, help="Number of frames")
    gen.add_argument("--skew", type=float, default=None, help="Camera time skew in seconds, applied to every camera")
    gen.add_argument("--speed", type=float, default=None, help="Ego speed in m/s")
    gen.add_argument("--yaw-rate", type=float, default=None, help="Ego yaw rate in rad/s")
    gen.add_argument("--seed", type=int, default=None, help="Scene seed")
    gen.add_argument("--height", type=int, default=None, help="Image rows")
    gen.add_argument("--width", type=int, default=None, help="Image columns")
    gen.add_argument("--focal", type=float, default=None, help="Focal length in pixels")
    gen.add_argument("--rays-azimuth", type=int, default=None, help="LiDAR rays per revolution")
    gen.add_argument("--rays-elevation", type=int, default=None, help="LiDAR beams")
    gen.add_argument("--window", type=int, default=3, help="Context window recorded in meta.json")
    gen.add_argument("--train-fraction", type=float, default=0.8, help="Share of frames in the train split")
    gen.add_argument("--project-dir", default=None, help="Directory holding scene_config.json overrides")

    project = sub.add_parser("project", help="Project one frame's points into one camera")
    project.add_argument("--data", required=True, help="Dataset directory")
    project.add_argument("--frame", type=int, default=0, help="Frame index")
    project.add_argument("--camera", type=int, default=0, help="Camera index")
    project.add_argument("--out", required=True, help="Output CSV")

    paint_cmd = sub.add_parser("paint", help="Write a frame's painted cloud")
    paint_cmd.add_argument("--data", required=True, help="Dataset directory")
    paint_cmd.add_argument("--frame", type=int, default=0, help="Frame index")
    paint_cmd.add_argument("--window", type=int, default=None, help="Context window (default: meta.json window)")
    paint_cmd.add_argument("--out", required=True, help="Output painted cloud file")

    train = sub.add_parser("train", help="Train one variant")
    train.add_argument("--data", required=True, help="Dataset directory")
    train.add_argument("--variant", default="full", help="Variant tag")
    train.add_argument("--epochs", type=int, default=None, help="Training epochs")
    train.add_argument("--seed", type=int, default=None, help="Initialisation and ordering seed")
    train.add_argument("--alpha", type=float, default=None, help="Weight of the offset loss")
    train.add_argument("--lr", type=float, default=None, help="SGD learning rate")
    train.add_argument("--offset-lr", type=float, default=None, help="SGD learning rate of the offset head")
    train.add_argument("--out", required=True, help="Run directory")
    train.add_argument("--project-dir", default=None, help="Directory holding pipeline_config.json overrides")

    evaluate = sub.add_parser("eval", help="Evaluate a trained run on held-out frames")
    evaluate.add_argument("--run", required=True, help="Run directory written by train")
    evaluate.add_argument("--data", required=True, help="Dataset directory")
    evaluate.add_argument("--out", required=True, help="Output CSV; the JSON report is written next to it")
    evaluate.add_argument("--workers", type=int, default=1, help="Evaluation threads")

    ablate = sub.add_parser("ablate", help="Train and evaluate several variants with shared seeds")
    ablate.add_argument("--data", required=True, help="Dataset directory")
    ablate.add_argument("--out", required=True, help="Output directory")
    ablate.add_argument("--seeds", type=_seed_list, default=[0, 1, 2], help="Comma separated seeds")
    ablate.add_argument("--variants", default=",".join(ABLATION_VARIANTS), help="Comma separated variant tags")
    ablate.add_argument("--epochs", type=int, default=None, help="Training epochs per run")
    ablate.add_argument("--workers", type=int, default=1, help="Parallel processes")
    ablate.add_argument("--project-dir", default=None, help="Directory holding pipeline_config.json overrides")

    sub.add_parser("formats", help="Print the on-disk format documentation")
    return parser


def _scene_spec(args) -> synthetic.SceneSpec:
    _, scene_overrides = load_project_config(args.project_dir)
    spec = synthetic.SceneSpec.from_dict(scene_overrides) if scene_overrides else synthetic.SceneSpec()
    flags = {
        "seed": args.seed,
        "speed": args.speed,
        "yaw_rate": args.yaw_rate,
        "height": args.height,
        "width": args.width,
        "focal": args.focal,
        "rays_azimuth": args.rays_azimuth,
        "rays_elevation": args.rays_elevation,
    }
    data = spec.to_dict()
    data.update({k: v for k, v in flags.items() if v is not None})
    spec = synthetic.SceneSpec.from_dict(data)
    if args.skew is not None:
        spec = spec.with_skew(args.skew)
    return spec


def cmd_gen(args):
    spec = _scene_spec(args)
    frames = synthetic.generate_dataset(spec, args.frames)
    split = synthetic.split_indices(len(frames), args.train_fraction, spec.seed) if len(frames) >= 2 else None
    dataio.write_dataset(args.out, frames, DEFAULT_CLASS_NAMES, window=args.window, split=split,
                         scene=spec.to_dict())
    print(f"Wrote {len(frames)} frames to {args.out}")


def _read_one_frame(data_dir, index):
    meta = dataio.read_meta(data_dir)
    count = len(meta.get("frames", []))
    if not 0 <= index < count:
        raise UsageError(f"--frame {index} outside [0, {count})")
    return meta, dataio.read_dataset(data_dir, frame_indices=[index]).frames[index]


def cmd_project(args):
    _, bundle = _read_one_frame(args.data, args.frame)
    if not 0 <= args.camera < bundle.camera_count:
        raise UsageError(f"--camera {args.camera} outside [0, {bundle.camera_count})")
    projections = project_bundle(bundle)
    coords, mask = projections.coords[args.camera], projections.masks[args.camera]
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["point", "row", "col", "depth", "visible"])
        for i in range(bundle.cloud.count):
            writer.writerow([i, repr(float(coords.idx[i, 0])), repr(float(coords.idx[i, 1])),
                             repr(float(coords.depth[i])), int(mask.mask[i])])
    print(f"Projected {bundle.cloud.count} points into camera {args.camera}; {mask.count} visible")


def cmd_paint(args):
    meta, bundle = _read_one_frame(args.data, args.frame)
    window = args.window if args.window is not None else int(meta.get("window", 3))
    painted = paint(bundle.cloud, bundle, window)
    dataio.write_painted(args.out, painted)
    print(f"Wrote {painted.rows.shape[0]} x {painted.width} painted cloud to {args.out}")


def _variant_tag(tag):
    try:
        return normalize_variant(tag)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _pipeline_config(variant, dataset: dataio.Dataset, project_dir=None, **flags) -> PipelineConfig:
    pipeline_overrides, _ = load_project_config(project_dir)
    overrides = dict(pipeline_overrides)
    overrides.pop("variant", None)
    overrides.update(class_count=len(dataset.class_names), class_names=tuple(dataset.class_names))
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return PipelineConfig.for_variant(variant, **overrides)


def cmd_train(args):
    variant = _variant_tag(args.variant)
    dataset = dataio.read_dataset(args.data)
    config = _pipeline_config(variant, dataset, args.project_dir, epochs=args.epochs, seed=args.seed,
                              alpha=args.alpha, learning_rate=args.lr,
                              offset_learning_rate=args.offset_lr)
    _, report = pipeline.train(config, dataset.train_frames(), dataset.held_out_frames(), run_dir=args.out)
    print(f"{config.variant}: mIoU={report.miou} offset error={report.mean_offset_error}")


def cmd_eval(args):
    models = pipeline.load_run(args.run)
    dataset = dataio.read_dataset(args.data)
    report = pipeline.evaluate(models, dataset.held_out_frames(), models.config, workers=args.workers)
    pipeline.write_evaluation(report, models.config, args.out)
    report.save(os.path.splitext(args.out)[0] + ".json")
    print(f"{models.config.variant}: mIoU={report.miou}")


def ablation_run(data_dir, out_dir, epochs, project_dir, job):
    """Train and evaluate one (variant, seed) pair; runs in a worker process."""
    variant, seed = job
    dataset = dataio.read_dataset(data_dir)
    config = _pipeline_config(variant, dataset, project_dir, epochs=epochs, seed=seed)
    run_dir = os.path.join(out_dir, config.variant, f"seed_{seed}")
    _, report = pipeline.train(config, dataset.train_frames(), dataset.held_out_frames(), run_dir=run_dir,
                               progress=False)
    return config.variant, seed, report.miou, report.mean_offset_error


def _median(values):
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


def cmd_ablate(args):
    variants = [_variant_tag(v) for v in args.variants.split(",") if v.strip()]
    if not variants or not args.seeds:
        raise UsageError("--variants and --seeds must each name at least one entry")
    dataio.ensure_directory_exists(args.out)
    jobs = [(v, s) for v in variants for s in args.seeds]
    run_one = partial(ablation_run, args.data, args.out, args.epochs, args.project_dir)
    if args.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.workers) as executor:
            results = list(executor.map(run_one, jobs))
    else:
        results = [run_one(job) for job in jobs]

    by_variant = {}
    for variant, seed, score, offset_error in results:
        by_variant.setdefault(variant, []).append((seed, score, offset_error))
    table_path = os.path.join(args.out, ABLATION_TABLE)
    with open(table_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["variant"] + [f"miou_seed_{s}" for s in args.seeds] + ["median_miou", "median_offset_error"])
        for variant, rows in by_variant.items():
            scores = {seed: score for seed, score, _ in rows}
            writer.writerow([variant] + [repr(scores[s]) for s in args.seeds]
                            + [repr(_median([r[1] for r in rows])), repr(_median([r[2] for r in rows]))])
    print(f"Wrote comparison of {len(by_variant)} variants over {len(args.seeds)} seeds to {table_path}")


def cmd_formats(args):
    sys.stdout.write(dataio.FORMAT_DOCUMENTATION)


COMMANDS = {
    "gen": cmd_gen,
    "project": cmd_project,
    "paint": cmd_paint,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "formats": cmd_formats,
}


def _report_failure(code: int, error: BaseException) -> int:
    print(f"lifseg-error code={code} kind={type(error).__name__} message={json.dumps(str(error))}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _report_failure(EXIT_USAGE, e)
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    setup_logging()
    logger.debug(f"lifseg {args.command}: {vars(args)}")
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        return _report_failure(EXIT_USAGE, e)
    except DATA_ERRORS as e:
        logger.error(f"{args.command} failed: {e}")
        return _report_failure(EXIT_DATA, e)
    except Exception as e:
        logger.exception(f"{args.command} failed")
        return _report_failure(EXIT_RUNTIME, e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
