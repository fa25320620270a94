import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Optional

import numpy as np

from config import RunConfig
from constants import config
from errors import CsPartsError, StageError, exit_code_for
from evaluation import Variant, evaluate
from file_ops import ImageFile
from log import logger
from parts import draw_overlay, write_boxes_csv
from pipeline import (
    PartEstimator,
    PipelineTrainer,
    load_bundle,
    prepare_image,
    save_bundle,
)
from sparse_linear import sparsity_report
from synthgen import generate, load_dataset, write_dataset


def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> None:
    directory = cfg.path("dataset_dir")
    train, test = generate(cfg.synth_config())
    write_dataset(directory, train, test)
    cfg.save(directory)
    print(f"wrote {len(train)} train and {len(test)} test images to {directory}")


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> None:
    train, _ = load_dataset(cfg.path("dataset_dir"))
    if not train:
        raise CsPartsError("dataset has no training images")
    trainer = PipelineTrainer(cfg.pipeline_config())
    model = trainer.fit([r.image for r in train], [r.label for r in train])

    directory = cfg.path("model_dir")
    save_bundle(model, directory)
    cfg.save(directory)

    for stage, seconds in trainer.timings.items():
        print(f"{stage:<18} {seconds:>8.2f}s")
    print(sparsity_report(model.selection).format())


def cmd_parts(cfg: RunConfig, args: argparse.Namespace) -> None:
    model = load_bundle(cfg.path("model_dir"))
    image_path = Path(args.image)
    img = prepare_image(ImageFile.load(image_path), model.backbone)
    estimate = PartEstimator(model).estimate(img)

    directory = cfg.path("output_dir")
    directory.mkdir(parents=True, exist_ok=True)
    write_boxes_csv(directory / "boxes.csv", [(image_path.stem, estimate.boxes)])
    saliency = (
        estimate.saliency.data
        if estimate.saliency is not None
        else np.zeros((img.height, img.width), dtype=np.float32)
    )
    ImageFile.save_grid(directory / "saliency.pgm", saliency)
    ImageFile.save_grid(
        directory / "overlay.pgm", draw_overlay(img, saliency, estimate.boxes)
    )
    cfg.save(directory)
    print(
        f"class {estimate.initial_class}: {len(estimate.boxes)} parts "
        f"from {len(estimate.channels)} channels"
    )


def _variants(args: argparse.Namespace, has_ablation: bool) -> list[Variant]:
    chosen = [
        variant
        for variant, flag in (
            (Variant.BASELINE, args.baseline),
            (Variant.NO_FS, args.no_fs),
            (Variant.FS, args.fs),
        )
        if flag
    ]
    if chosen:
        return chosen
    if has_ablation:
        return list(Variant)
    return [Variant.BASELINE, Variant.FS]


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> None:
    model = load_bundle(cfg.path("model_dir"))
    _, test = load_dataset(cfg.path("dataset_dir"))
    if not test:
        raise CsPartsError("dataset has no test images")
    report = evaluate(test, model, _variants(args, model.final_no_fs is not None))

    directory = cfg.path("output_dir")
    report.write(directory)
    cfg.save(directory)
    print(report.format())


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "parts": cmd_parts,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value run config")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="csparts",
        description="Classification-specific part estimation",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser(
        "synth", parents=[common], help="generate the synthetic glyph dataset"
    )
    commands.add_parser(
        "train", parents=[common], help="train a model bundle on a dataset"
    )
    parts = commands.add_parser(
        "parts", parents=[common], help="estimate parts for one image"
    )
    parts.add_argument("image", help="PPM or PGM image")
    evaluation = commands.add_parser(
        "eval", parents=[common], help="evaluate a model bundle on the test split"
    )
    evaluation.add_argument("--baseline", action="store_true")
    evaluation.add_argument("--no-fs", dest="no_fs", action="store_true")
    evaluation.add_argument("--fs", action="store_true")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help exits 0; every parse failure is a usage error
        return config.EXIT_USAGE if e.code else 0

    if args.verbose:
        logger.setLevel(logging.DEBUG)

    stage = args.command
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(args.overrides)
        COMMANDS[args.command](cfg, args)
    except Exception as e:
        if isinstance(e, StageError):
            stage, message = e.stage, str(e.cause)
        else:
            message = str(e)
        if not isinstance(e, CsPartsError):
            logger.exception(f"Unexpected error in {stage}")
        print(f"error [{stage}]: {message}", file=sys.stderr)
        return exit_code_for(e)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
