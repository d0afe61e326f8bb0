"""F-scores, confusion matrices, evaluation reports and the latency benchmark."""
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from hgrnet.data import DatasetSplit
from hgrnet.errors import ConfigurationError, ContractError, DataError
from hgrnet.models import count_parameters
from hgrnet.tensor import Tensor, get_num_threads, no_grad, set_num_threads

logger = logging.getLogger(__name__)

# Published per-frame latency, printed alongside measurements for context only.
REFERENCE_LATENCY_MS = 23.0
REFERENCE_FPS = 43


def f_score(precision: float, recall: float) -> float:
    total = precision + recall
    return 0.0 if total <= 0 else 2.0 * precision * recall / total


def _ratio(numerator: float, denominator: float) -> float:
    return float(numerator) / float(denominator) if denominator > 0 else 0.0


def pixel_counts(pred: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> Tuple[int, int, int]:
    """True positive, false positive and false negative foreground pixel counts."""
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold must lie in (0, 1), got {threshold}")
    if pred.shape != truth.shape:
        raise DataError(f"prediction shape {pred.shape} != mask shape {truth.shape}")
    predicted = pred >= threshold
    actual = truth >= 0.5
    tp = int(np.count_nonzero(predicted & actual))
    return tp, int(np.count_nonzero(predicted & ~actual)), int(np.count_nonzero(~predicted & actual))


def pixel_f_score(pred: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> float:
    """Foreground F-score pooled over every pixel of the given arrays."""
    tp, fp, fn = pixel_counts(pred, truth, threshold)
    return f_score(_ratio(tp, tp + fp), _ratio(tp, tp + fn))


@dataclass
class ConfusionMatrix:
    """Counts with rows indexed by target class and columns by predicted class."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def precision(self) -> np.ndarray:
        predicted = self.counts.sum(axis=0)
        return np.array([_ratio(self.counts[c, c], predicted[c]) for c in range(self.num_classes)])

    def recall(self) -> np.ndarray:
        support = self.counts.sum(axis=1)
        return np.array([_ratio(self.counts[c, c], support[c]) for c in range(self.num_classes)])

    def f1(self) -> np.ndarray:
        return np.array([f_score(p, r) for p, r in zip(self.precision(), self.recall())])

    def row_normalized(self) -> np.ndarray:
        support = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, support, out=np.zeros(self.counts.shape), where=support > 0)

    def to_frame(self, class_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
        names = list(class_names) if class_names else [str(c) for c in range(self.num_classes)]
        frame = pd.DataFrame(self.counts, index=names, columns=names)
        frame.index.name = "target"
        frame.columns.name = "predicted"
        return frame


def confusion(pred: Sequence[int], true: Sequence[int], num_classes: int) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise DataError(f"{pred.size} predictions for {true.size} targets")
    for name, labels in (("predicted", pred), ("target", true)):
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise DataError(f"{name} label outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts)


def macro_f_score(matrix: ConfusionMatrix) -> float:
    if matrix.total == 0:
        raise DataError("confusion matrix is empty")
    return float(matrix.f1().mean())


def micro_f_score(matrix: ConfusionMatrix) -> float:
    """Pooled F-score; equals accuracy for single-label predictions."""
    if matrix.total == 0:
        raise DataError("confusion matrix is empty")
    return _ratio(np.trace(matrix.counts), matrix.total)


# --- reports -----------------------------------------------------------------------------------


class ClassScores(BaseModel):
    class_index: int
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    support: int


class LatencyStats(BaseModel):
    mode: str
    threads: int
    input_shape: List[int]
    warmup: int
    timings_ms: List[float]
    mean_ms: float = Field(gt=0.0)
    median_ms: float = Field(gt=0.0)
    p95_ms: float = Field(gt=0.0)
    parameter_count: int
    reference_ms: float = REFERENCE_LATENCY_MS

    def to_text(self) -> str:
        return (
            f"{self.mode} ({self.threads} thread{'s' if self.threads != 1 else ''}), input {tuple(self.input_shape)}: "
            f"mean {self.mean_ms:.2f} ms, median {self.median_ms:.2f} ms, p95 {self.p95_ms:.2f} ms "
            f"over {len(self.timings_ms)} runs; parameters {self.parameter_count:,}; "
            f"published reference {self.reference_ms:.0f} ms ({REFERENCE_FPS} fps, GPU)"
        )


class EvalReport(BaseModel):
    model_kind: str
    split: str
    num_samples: int
    per_class: List[ClassScores] = Field(default_factory=list)
    macro_f_score: Optional[float] = Field(None, ge=0.0, le=1.0)
    micro_f_score: Optional[float] = Field(None, ge=0.0, le=1.0)
    pixel_f_score: Optional[float] = Field(None, ge=0.0, le=1.0)
    threshold: float = 0.5
    latency: List[LatencyStats] = Field(default_factory=list)
    trainable_parameters: Optional[int] = None
    total_parameters: Optional[int] = None
    serialized_bytes: Optional[int] = None
    confusion: Optional[List[List[int]]] = None

    def to_text(self) -> str:
        lines = [f"model: {self.model_kind}", f"split: {self.split} ({self.num_samples} samples)"]
        if self.pixel_f_score is not None:
            lines.append(f"pixel F-score (threshold {self.threshold}): {self.pixel_f_score:.4f}")
        if self.per_class:
            frame = pd.DataFrame([c.model_dump() for c in self.per_class]).set_index("class_index")
            lines.append(frame.to_string(float_format=lambda v: f"{v:.4f}"))
            lines.append(f"macro F-score: {self.macro_f_score:.4f}")
            lines.append(f"micro F-score (accuracy): {self.micro_f_score:.4f}")
        if self.total_parameters is not None:
            lines.append(f"parameters: {self.total_parameters:,} total, {self.trainable_parameters:,} trainable "
                         f"({self.total_parameters / 1e6:.3f}M)")
        if self.serialized_bytes is not None:
            lines.append(f"model size: {self.serialized_bytes / 1e6:.2f} MB")
        lines.extend(stats.to_text() for stats in self.latency)
        return "\n".join(lines)

    def write(self, report_dir: Union[str, Path]) -> List[Path]:
        """Write the text table, a JSON record and, for recognition, the confusion matrix CSV."""
        report_dir = Path(report_dir)
        report_dir.mkdir(parents=True, exist_ok=True)
        written = [report_dir / "report.txt", report_dir / "report.json"]
        written[0].write_text(self.to_text() + "\n", encoding="utf-8")
        written[1].write_text(json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if self.confusion is not None:
            path = report_dir / "confusion.csv"
            ConfusionMatrix(np.array(self.confusion, dtype=np.int64)).to_frame().to_csv(path, lineterminator="\n")
            written.append(path)
        logger.info(f"Evaluation report written to {report_dir}")
        return written


def class_scores(matrix: ConfusionMatrix) -> List[ClassScores]:
    support = matrix.counts.sum(axis=1)
    return [
        ClassScores(class_index=c, precision=p, recall=r, f1=f, support=int(s))
        for c, (p, r, f, s) in enumerate(zip(matrix.precision(), matrix.recall(), matrix.f1(), support))
    ]


Predictor = Callable[[np.ndarray], np.ndarray]


def _predict_batched(predict_fn: Predictor, images: np.ndarray, batch_size: int) -> np.ndarray:
    return np.concatenate([predict_fn(images[i:i + batch_size]) for i in range(0, len(images), batch_size)], axis=0)


def evaluate_segmentation(predict_fn: Predictor, split: DatasetSplit, model_kind: str = "segmentation",
                          batch_size: int = 8, threshold: float = 0.5) -> Tuple[EvalReport, np.ndarray]:
    """Score probability maps against the split's masks; returns the report and the maps."""
    if not split.has_masks:
        raise DataError(f"{split.role.value} split has no masks to evaluate segmentation against")
    maps = _predict_batched(predict_fn, split.images(), batch_size)
    score = pixel_f_score(maps, split.masks(), threshold)
    report = EvalReport(model_kind=model_kind, split=split.role.value, num_samples=len(split),
                        pixel_f_score=score, threshold=threshold)
    return report, maps


def evaluate_recognition(predict_fn: Predictor, split: DatasetSplit, model_kind: str,
                         batch_size: int = 8, inputs: Optional[np.ndarray] = None) -> Tuple[EvalReport, ConfusionMatrix]:
    """Score class distributions; ``inputs`` overrides the RGB images (binary masks for the shape-only model)."""
    if not split.has_labels:
        raise DataError(f"{split.role.value} split has no labels to evaluate recognition against")
    images = split.images() if inputs is None else inputs
    probabilities = _predict_batched(predict_fn, images, batch_size)
    matrix = confusion(probabilities.argmax(axis=1), split.class_indices(), split.num_classes)
    report = EvalReport(
        model_kind=model_kind,
        split=split.role.value,
        num_samples=len(split),
        per_class=class_scores(matrix),
        macro_f_score=macro_f_score(matrix),
        micro_f_score=micro_f_score(matrix),
        confusion=matrix.counts.tolist(),
    )
    return report, matrix


# --- latency -----------------------------------------------------------------------------------


def _time_forward(model, x: Tensor, warmup: int, iters: int) -> List[float]:
    with no_grad():
        for _ in range(warmup):
            model(x)
        timings = []
        for _ in range(iters):
            start = time.perf_counter()
            model(x)
            timings.append((time.perf_counter() - start) * 1000.0)
    return timings


def benchmark_latency(model, input_shape: Sequence[int], warmup: int = 2, iters: int = 10,
                      thread_counts: Optional[Sequence[int]] = None, seed: int = 0) -> List[LatencyStats]:
    """Per-iteration forward time in eval mode, once per kernel thread count (single-threaded first)."""
    if warmup < 1:
        raise ConfigurationError(f"warmup must be >= 1, got {warmup}")
    if iters < 1:
        raise ConfigurationError(f"iters must be >= 1, got {iters}")
    if model.training:
        raise ContractError("benchmark_latency needs a model in eval mode")
    previous = get_num_threads()
    thread_counts = list(thread_counts) if thread_counts else [1, max(previous, 2)]
    x = Tensor(np.random.default_rng(seed).uniform(0.0, 1.0, size=tuple(input_shape)))
    parameters = count_parameters(model, breakdown=False).total
    results = []
    try:
        for threads in thread_counts:
            set_num_threads(threads)
            timings = _time_forward(model, x, warmup, iters)
            stats = LatencyStats(
                mode="single-threaded" if threads == 1 else "multi-threaded",
                threads=threads,
                input_shape=list(input_shape),
                warmup=warmup,
                timings_ms=timings,
                mean_ms=float(np.mean(timings)),
                median_ms=float(np.median(timings)),
                p95_ms=float(np.percentile(timings, 95)),
                parameter_count=parameters,
            )
            logger.info(stats.to_text())
            results.append(stats)
    finally:
        set_num_threads(previous)
    return results


def nearest_neighbor_accuracy(train: DatasetSplit, test: DatasetSplit, size: int = 32) -> float:
    """1-NN accuracy on downsampled masks: a floor showing the classes are separable by shape alone."""
    if not (train.has_masks and test.has_masks and train.has_labels and test.has_labels):
        raise DataError("nearest-neighbour baseline needs masks and labels in both splits")

    def features(split: DatasetSplit) -> np.ndarray:
        return np.stack([cv2.resize(s.mask[..., 0], (size, size), interpolation=cv2.INTER_AREA).ravel()
                         for s in split.samples])

    reference, queries = features(train), features(test)
    distances = ((queries[:, None, :] - reference[None, :, :]) ** 2).sum(axis=2)
    predicted = train.class_indices()[distances.argmin(axis=1)]
    return float((predicted == test.class_indices()).mean())
