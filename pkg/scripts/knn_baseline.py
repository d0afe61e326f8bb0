"""1-nearest-neighbour accuracy on downsampled masks: how separable the gesture classes are by shape alone."""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from hgrnet.data import SplitRole, generate_synthetic, load_dataset  # noqa: E402
from hgrnet.evaluation import nearest_neighbor_accuracy  # noqa: E402


def load_splits(args):
    if args.data:
        train = load_dataset(args.data, SplitRole.TRAIN, args.classes, args.image_size)
        test = load_dataset(args.data, SplitRole.TEST, args.classes, args.image_size)
        return train, test, f"dataset at {args.data}"
    splits = generate_synthetic((200, 0, 50), args.classes, args.seed, args.image_size)
    return splits[SplitRole.TRAIN], splits[SplitRole.TEST], f"synthetic gestures (seed {args.seed})"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", help="dataset root; omit to generate the synthetic set in memory")
    parser.add_argument("--classes", type=int, default=4)
    parser.add_argument("--image-size", type=int, default=320)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--size", type=int, default=32, help="side of the downsampled mask")
    args = parser.parse_args()

    print("Nearest-neighbour shape baseline")
    print("=" * 50)
    try:
        train, test, source = load_splits(args)
    except Exception as e:
        print(f"❌ Could not load data: {e}")
        return 1

    print(f"Source: {source}")
    print(f"Train samples: {len(train)}, test samples: {len(test)}, classes: {train.num_classes}")
    accuracy = nearest_neighbor_accuracy(train, test, args.size)
    print("-" * 50)
    print(f"1-NN accuracy on {args.size}x{args.size} masks: {accuracy:.4f}")
    print(f"Chance level: {1.0 / train.num_classes:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
