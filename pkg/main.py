"""Command-line entry point for segmentation, stream and fused gesture recognition runs."""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from config import Config, RunConfig
from hgrnet.errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    HGRNetError,
    NumericError,
    ShapeError,
)
from hgrnet.models import REPORT_KINDS
from hgrnet.pipeline import PipelineRunner

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageParser(argparse.ArgumentParser):
    """Argument parser whose usage errors share exit code 1 with configuration errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _class_count(text: str) -> int:
    value = int(text)
    if value < 2:
        raise argparse.ArgumentTypeError(f"need at least 2 classes, got {value}")
    return value


def _split_sizes(text: str) -> List[int]:
    try:
        sizes = [int(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    if len(sizes) != 3 or min(sizes) < 0:
        raise argparse.ArgumentTypeError(f"expected three non-negative sizes train,validation,test, got {text!r}")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    common = UsageParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key = value lines)")
    common.add_argument("--data", help="dataset root with train/validation/test directories")
    common.add_argument("--out", help="run directory for checkpoints, logs and reports")
    common.add_argument("--seed", type=int, help="seed for initialization, shuffling and augmentation")
    common.add_argument("--threads", type=int, help="kernel threads for the tensor core")
    common.add_argument("--classes", type=_class_count, help="number of gesture classes")
    common.add_argument("--image-size", type=int, help="square input size (multiple of 4, at least 107)")
    common.add_argument("--verbose", action="store_true", help="log at DEBUG level")

    parser = UsageParser(prog="hgrnet", description="Hand segmentation and gesture recognition networks")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    synth = commands.add_parser("synth", parents=[common], help="generate the seeded synthetic gesture dataset")
    synth.add_argument("--per-split", type=_split_sizes, help="train,validation,test sample counts")

    commands.add_parser("train-seg", parents=[common], help="step 1: train the segmentation network")

    stream = commands.add_parser("train-stream", parents=[common], help="step 2: train one recognition stream")
    stream.add_argument("--which", required=True, choices=["shape", "appearance", "shape-only"])

    fuse = commands.add_parser("train-fuse", parents=[common], help="step 3: fine-tune the fused network")
    fuse.add_argument("--freeze-pre-fc2", action="store_true", help="train only the layers after fc2")

    crossval = commands.add_parser("crossval-seg", parents=[common], help="repeated random-split segmentation runs")
    crossval.add_argument("--folds", type=int, default=3)
    crossval.add_argument("--train-fraction", type=float, default=0.66)

    evaluate = commands.add_parser("eval", parents=[common], help="score a checkpoint on a dataset split")
    evaluate.add_argument("--model", required=True, help="checkpoint to evaluate")
    evaluate.add_argument("--split", default="test", choices=["train", "validation", "test"])
    evaluate.add_argument("--report-dir", help="defaults to <out>/report_<split>")

    infer = commands.add_parser("infer", parents=[common], help="run one checkpoint on one PNG")
    infer.add_argument("--model", required=True)
    infer.add_argument("--image", required=True)
    infer.add_argument("--output", help="alias of --out, which names the class distribution text file or probability-map PNG")

    params = commands.add_parser("report-params", parents=[common], help="print the parameter breakdown of a model")
    params.add_argument("--model-kind", required=True, choices=REPORT_KINDS)
    params.add_argument("--shortcuts", choices=["auto", "all"], help="projection shortcut convention")
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig.load(
        args.config,
        data_root=args.data,
        output_dir=None if args.command == "infer" else args.out,
        seed=args.seed,
        threads=args.threads,
        num_classes=args.classes,
        image_size=args.image_size,
        projection_shortcuts=getattr(args, "shortcuts", None),
    )


def run(args: argparse.Namespace) -> None:
    config = _run_config(args)
    if args.command == "infer":
        # --out names the prediction file; stage-1 weights sit beside the checkpoint's step directory
        output = args.output or args.out
        if not output:
            raise ConfigurationError("infer needs --out naming the output file")
        runner = PipelineRunner(config, out_dir=Path(args.model).parent.parent)
        print(runner.infer(args.model, args.image, output))
        return
    runner = PipelineRunner(config)
    if args.command == "synth":
        counts = args.per_split or [config.synth_train, config.synth_validation, config.synth_test]
        sizes = runner.synthesize(counts, config.num_classes, config.seed)
        print(" ".join(f"{role}={count}" for role, count in sizes.items()))
    elif args.command == "train-seg":
        print(runner.train_segmentation())
    elif args.command == "train-stream":
        print(runner.train_stream(args.which.replace("-", "_")))
    elif args.command == "train-fuse":
        print(runner.train_fusion(args.freeze_pre_fc2))
    elif args.command == "crossval-seg":
        scores = runner.crossval_segmentation(args.folds, args.train_fraction)
        print(" ".join(f"{s:.4f}" for s in scores))
    elif args.command == "eval":
        report = runner.evaluate(args.model, args.split, args.report_dir or runner.out_dir / f"report_{args.split}")
        print(report.to_text())
    elif args.command == "report-params":
        print(runner.report_params(args.model_kind))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    Config.setup_logging("DEBUG" if args.verbose else None)
    try:
        Config.validate()
        run(args)
        return EXIT_OK
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except (DataError, CheckpointError, ShapeError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_DATA
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except HGRNetError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
