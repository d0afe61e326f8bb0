"""Run-directory orchestration shared by the command-line entry points."""
import json
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from config import RunConfig
from hgrnet import __version__
from hgrnet.blocks import aspp_parameter_count
from hgrnet.data import (
    SplitRole,
    generate_synthetic,
    load_dataset,
    read_image,
    read_mask,
    write_dataset,
    write_probability_map,
    write_provenance,
)
from hgrnet.errors import ConfigurationError
from hgrnet.evaluation import benchmark_latency, evaluate_recognition, evaluate_segmentation
from hgrnet.models import (
    PUBLISHED_PARAMETERS,
    PUBLISHED_TOLERANCE,
    REPORT_KINDS,
    SegmentationNet,
    StreamClassifier,
    build_report_model,
    count_parameters,
    load_model,
    predict,
    published_deltas,
    reconcile_parameter_counts,
)
from hgrnet.tensor import set_num_threads
from hgrnet.training import (
    STREAM_STEPS,
    TrainPlan,
    TrainResult,
    TrainStep,
    cross_validate_segmentation,
    train_fusion,
    train_segmentation,
    train_stream,
)
from hgrnet.visualization import VisualizationService

logger = logging.getLogger(__name__)

STEP_DIRS = {
    TrainStep.SEGMENTATION: "segmentation",
    TrainStep.SHAPE_STREAM: "shape_stream",
    TrainStep.APPEARANCE_STREAM: "appearance_stream",
    TrainStep.SHAPE_ONLY: "shape_only",
    TrainStep.FUSION: "fusion",
}


class PipelineRunner:
    """Runs one command against a run directory and records what it produced in ``manifest.json``."""

    def __init__(self, config: RunConfig, out_dir: Optional[Union[str, Path]] = None):
        self.config = config
        self.out_dir = Path(out_dir or config.output_dir or "runs")
        self.visualization_service = VisualizationService()
        set_num_threads(config.threads)
        logger.info(f"Pipeline runner initialized for {self.out_dir}")

    # --- bookkeeping ---------------------------------------------------------------------------

    def _record(self, command: str, outputs: Sequence[Path], **details) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        manifest_path = self.out_dir / "manifest.json"
        manifest = json.loads(manifest_path.read_text(encoding="utf-8")) if manifest_path.is_file() else {
            "hgrnet_version": __version__, "commands": []}
        entry = {"command": command, "outputs": sorted(str(p) for p in outputs)}
        entry.update(details)
        manifest["commands"] = [c for c in manifest["commands"] if c["command"] != command] + [entry]
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return manifest_path

    def _echo_config(self) -> Path:
        return self.config.dump(self.out_dir / "effective_config.cfg")

    def _data_root(self) -> Path:
        if not self.config.data_root:
            raise ConfigurationError("no dataset root given (--data or data_root in the config)")
        return Path(self.config.data_root)

    def _split(self, role: SplitRole):
        return load_dataset(self._data_root(), role, self.config.num_classes, self.config.image_size)

    def _plan(self, step: TrainStep) -> TrainPlan:
        key = "fusion" if step == TrainStep.FUSION else "segmentation" if step == TrainStep.SEGMENTATION else "stream"
        return TrainPlan.for_step(step, **self.config.plan_overrides(key))

    def checkpoint_path(self, step: TrainStep) -> Path:
        configured = {
            TrainStep.SEGMENTATION: self.config.seg_checkpoint,
            TrainStep.SHAPE_STREAM: self.config.shape_checkpoint,
            TrainStep.APPEARANCE_STREAM: self.config.appearance_checkpoint,
        }.get(step)
        return Path(configured) if configured else self.out_dir / STEP_DIRS[step] / "best.hgrn"

    def _finish_training(self, command: str, result: TrainResult) -> Dict[str, Any]:
        run_dir = self.out_dir / STEP_DIRS[result.step]
        curve = self.visualization_service.write_html(
            self.visualization_service.training_curve_config(result.records, result.step.value),
            run_dir / "training_curve.html",
        )
        outputs = [result.checkpoint_path, run_dir / "optimizer.hgrn", run_dir / "train.log", self._echo_config()]
        if curve is not None:
            outputs.append(curve)
        self._record(command, outputs, best_epoch=result.best.epoch,
                     best_validation_metric=result.best.validation_metric)
        return {
            "checkpoint": str(result.checkpoint_path),
            "best_epoch": result.best.epoch,
            "validation_metric": result.best.validation_metric,
            "epochs": len(result.records),
        }

    # --- commands ------------------------------------------------------------------------------

    def synthesize(self, counts: Sequence[int], num_classes: int, seed: int) -> Dict[str, int]:
        logger.info(f"Step 1: Generating synthetic gestures {tuple(counts)} with {num_classes} classes...")
        splits = generate_synthetic(counts, num_classes, seed, self.config.image_size)
        logger.info(f"Step 2: Writing dataset to {self.out_dir}...")
        outputs = [write_dataset(split, self.out_dir) for split in splits.values()]
        outputs.append(write_provenance(self.out_dir, splits, seed))
        sizes = {role.value: len(split) for role, split in splits.items()}
        self._record("synth", outputs, num_classes=num_classes, seed=seed, sizes=sizes)
        return sizes

    def train_segmentation(self) -> Dict[str, Any]:
        start_time = time.time()
        try:
            logger.info("Step 1: Loading training and validation splits...")
            train, validation = self._split(SplitRole.TRAIN), self._split(SplitRole.VALIDATION)
            logger.info("Step 2: Training the segmentation network...")
            result = train_segmentation(train, validation, self._plan(TrainStep.SEGMENTATION),
                                        self.out_dir / STEP_DIRS[TrainStep.SEGMENTATION],
                                        self.config.use_aspp, self.config.projection_shortcuts)
            summary = self._finish_training("train-seg", result)
            logger.info(f"Segmentation training completed in {time.time() - start_time:.2f}s")
            return summary
        except Exception as e:
            logger.error(f"Segmentation training failed: {e}")
            raise

    def train_stream(self, which: str) -> Dict[str, Any]:
        start_time = time.time()
        try:
            if which not in STREAM_STEPS:
                raise ConfigurationError(f"stream must be one of {sorted(STREAM_STEPS)}, got {which!r}")
            step = STREAM_STEPS[which]
            seg = self.checkpoint_path(TrainStep.SEGMENTATION) if which == "shape" else None
            logger.info("Step 1: Loading training and validation splits...")
            train, validation = self._split(SplitRole.TRAIN), self._split(SplitRole.VALIDATION)
            logger.info(f"Step 2: Training the {which} stream...")
            result = train_stream(train, validation, which, self._plan(step), seg, self.out_dir / STEP_DIRS[step])
            summary = self._finish_training(f"train-stream:{which}", result)
            logger.info(f"Stream training completed in {time.time() - start_time:.2f}s")
            return summary
        except Exception as e:
            logger.error(f"{which} stream training failed: {e}")
            raise

    def train_fusion(self, freeze_pre_fc2: bool = False) -> Dict[str, Any]:
        start_time = time.time()
        try:
            plan = self._plan(TrainStep.FUSION)
            if freeze_pre_fc2:
                plan = plan.model_copy(update={"freeze_pre_fc2": True})
            logger.info("Step 1: Loading training and validation splits...")
            train, validation = self._split(SplitRole.TRAIN), self._split(SplitRole.VALIDATION)
            logger.info(f"Step 2: Fine-tuning HGR-Net (freeze_pre_fc2={plan.freeze_pre_fc2})...")
            result = train_fusion(
                train, validation,
                self.checkpoint_path(TrainStep.SEGMENTATION),
                self.checkpoint_path(TrainStep.SHAPE_STREAM),
                self.checkpoint_path(TrainStep.APPEARANCE_STREAM),
                plan, self.out_dir / STEP_DIRS[TrainStep.FUSION],
            )
            summary = self._finish_training("train-fuse", result)
            logger.info(f"Fusion training completed in {time.time() - start_time:.2f}s")
            return summary
        except Exception as e:
            logger.error(f"Fusion training failed: {e}")
            raise

    def crossval_segmentation(self, folds: int = 3, train_fraction: float = 0.66) -> List[float]:
        logger.info(f"Step 1: Loading the training split for {folds}-fold cross-validation...")
        split = self._split(SplitRole.TRAIN)
        logger.info("Step 2: Training one segmentation network per fold...")
        scores = cross_validate_segmentation(split, self._plan(TrainStep.SEGMENTATION), folds, train_fraction,
                                             self.out_dir / "crossval")
        path = self.out_dir / "crossval" / "scores.json"
        path.write_text(json.dumps({"fold_scores": scores, "mean": float(np.mean(scores))}, indent=2) + "\n",
                        encoding="utf-8")
        self._record("crossval-seg", [path, self._echo_config()])
        return scores

    def evaluate(self, model_path: Union[str, Path], split: str, report_dir: Union[str, Path]):
        start_time = time.time()
        report_dir = Path(report_dir)
        try:
            logger.info(f"Step 1: Loading model from {model_path}...")
            model, meta = load_model(model_path)
            if isinstance(model, StreamClassifier) and model.stream == "shape":
                model.attach_segmentation(load_model(self.checkpoint_path(TrainStep.SEGMENTATION), "segmentation")[0])
            model.eval()
            logger.info(f"Step 2: Loading the {split} split...")
            data = load_dataset(self._data_root(), split, getattr(model, "num_classes", self.config.num_classes),
                                model.image_size)

            def predict_fn(x: np.ndarray) -> np.ndarray:
                return predict(model, x, len(x))

            logger.info("Step 3: Scoring predictions...")
            outputs: List[Path] = []
            if isinstance(model, SegmentationNet):
                report, maps = evaluate_segmentation(predict_fn, data, model.kind)
                for sample, prob in zip(data.samples, maps):
                    outputs.append(write_probability_map(prob, report_dir / "predictions" / f"{sample.id}.png"))
            else:
                inputs = data.masks() if model.kind == "shape_only" else None
                report, matrix = evaluate_recognition(predict_fn, data, model.kind, inputs=inputs)
                heatmap = self.visualization_service.write_html(
                    self.visualization_service.confusion_config(matrix), report_dir / "confusion_matrix.html")
                if heatmap is not None:
                    outputs.append(heatmap)

            logger.info("Step 4: Counting parameters and timing forward passes...")
            params = count_parameters(model)
            channels = 1 if model.kind == "shape_only" else 3
            report.trainable_parameters = params.trainable
            report.total_parameters = params.total
            report.serialized_bytes = params.serialized_bytes
            report.latency = benchmark_latency(model, (1, model.image_size, model.image_size, channels),
                                               self.config.latency_warmup, self.config.latency_iters,
                                               seed=self.config.seed)
            latency_chart = self.visualization_service.write_html(
                self.visualization_service.latency_config(report.latency), report_dir / "latency.html")
            if latency_chart is not None:
                outputs.append(latency_chart)
            outputs.extend(report.write(report_dir))
            self._record(f"eval:{split}", outputs, model=str(model_path), kind=meta.get("kind"))
            logger.info(f"Evaluation completed in {time.time() - start_time:.2f}s")
            return report
        except Exception as e:
            logger.error(f"Evaluation failed: {e}")
            raise

    def infer(self, model_path: Union[str, Path], image_path: Union[str, Path], out_path: Union[str, Path]) -> Path:
        model, _ = load_model(model_path)
        if isinstance(model, StreamClassifier) and model.stream == "shape":
            model.attach_segmentation(load_model(self.checkpoint_path(TrainStep.SEGMENTATION), "segmentation")[0])
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        if model.kind == "shape_only":
            x = read_mask(image_path, model.image_size)[None]
        else:
            x = read_image(image_path, model.image_size)[None]
        output = predict(model, x, 1)[0]
        if isinstance(model, SegmentationNet):
            written = write_probability_map(output, out_path.with_suffix(".png"))
        else:
            lines = [f"{index} {p:.8f}" for index, p in enumerate(output)]
            out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written = out_path
            logger.info(f"Predicted class {int(np.argmax(output))} with probability {float(output.max()):.4f}")
        logger.info(f"Inference output written to {written}")
        return written

    def report_params(self, kind: str) -> str:
        if kind not in REPORT_KINDS:
            raise ConfigurationError(f"unknown model kind {kind!r}; choose from {', '.join(REPORT_KINDS)}")
        model = build_report_model(kind, self.config.num_classes, self.config.image_size,
                                   self.config.projection_shortcuts, self.config.seed)
        report = count_parameters(model)
        lines = [f"model kind: {kind} (C={self.config.num_classes}, shortcuts={self.config.projection_shortcuts})",
                 report.to_text()]
        totals = reconcile_parameter_counts(kind, self.config.num_classes, self.config.image_size)
        lines.append("shortcut conventions: " + ", ".join(f"{mode} = {total:,}" for mode, total in totals.items()))
        deltas = published_deltas(kind, totals, self.config.num_classes)
        if deltas is not None:
            lines.append(f"published total: {PUBLISHED_PARAMETERS[kind]:,}; "
                         + ", ".join(f"{mode} {delta:+.1%}" for mode, delta in deltas.items())
                         + f" (tolerance {PUBLISHED_TOLERANCE:.0%})")
            if abs(deltas[self.config.projection_shortcuts]) > PUBLISHED_TOLERANCE:
                closest = min(deltas, key=lambda mode: abs(deltas[mode]))
                logger.warning(f"{kind}: shortcuts={self.config.projection_shortcuts} is "
                               f"{deltas[self.config.projection_shortcuts]:+.1%} from the published total; "
                               f"shortcuts={closest} is {deltas[closest]:+.1%}")
        if kind.startswith("stage1"):
            lines.append(f"ASPP closed form: {aspp_parameter_count(128):,}")
        return "\n".join(lines)
