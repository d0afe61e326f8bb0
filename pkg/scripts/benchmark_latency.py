"""Time single-frame forward passes of an untrained or checkpointed model."""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from hgrnet.evaluation import REFERENCE_FPS, REFERENCE_LATENCY_MS, benchmark_latency  # noqa: E402
from hgrnet.models import REPORT_KINDS, build_report_model, count_parameters, load_model  # noqa: E402


def load_timed_model(parser: argparse.ArgumentParser, args: argparse.Namespace):
    """The checkpoint to time, with stage-1 weights attached when it is a shape stream."""
    model, meta = load_model(args.model)
    label = f"{meta['kind']} from {args.model}"
    if meta["kind"] == "shape_stream":
        seg_path = Path(args.segmentation) if args.segmentation else Path(args.model).parent.parent / "segmentation" / "best.hgrn"
        if not seg_path.is_file():
            parser.error(f"a shape-stream checkpoint needs stage-1 weights; pass --segmentation (looked for {seg_path})")
        model.attach_segmentation(load_model(seg_path, "segmentation")[0])
        label += f" with segmentation from {seg_path}"
    return model, label


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--model", help="checkpoint to time")
    source.add_argument("--model-kind", choices=REPORT_KINDS, help="time an untrained model of this kind")
    parser.add_argument("--classes", type=int, default=10)
    parser.add_argument("--image-size", type=int, default=320)
    parser.add_argument("--warmup", type=int, default=2)
    parser.add_argument("--iters", type=int, default=10)
    parser.add_argument("--threads", type=int, nargs="+", default=None, help="thread counts to compare")
    parser.add_argument("--segmentation", help="stage-1 checkpoint for a shape-stream model "
                                               "(default: segmentation/best.hgrn in the same run directory)")
    args = parser.parse_args(argv)

    if args.model:
        model, label = load_timed_model(parser, args)
    else:
        model = build_report_model(args.model_kind, args.classes, args.image_size)
        label = f"untrained {args.model_kind}"
    model.eval()
    channels = 1 if model.kind == "shape_only" else 3
    shape = (1, model.image_size, model.image_size, channels)

    print("Forward latency benchmark")
    print("=" * 60)
    print(f"Model: {label}")
    print(f"Parameters: {count_parameters(model, breakdown=False).total:,}")
    print(f"Input: {shape}")
    print("-" * 60)
    try:
        results = benchmark_latency(model, shape, args.warmup, args.iters, args.threads)
    except Exception as e:
        print(f"❌ Benchmark failed: {e}")
        return 1
    for stats in results:
        print(f"  {stats.mode:16} {stats.threads:>2} threads  mean {stats.mean_ms:9.2f} ms  "
              f"median {stats.median_ms:9.2f} ms  p95 {stats.p95_ms:9.2f} ms")
    print("-" * 60)
    print(f"Published reference: {REFERENCE_LATENCY_MS:.0f} ms per frame ({REFERENCE_FPS} fps on a GPU)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
