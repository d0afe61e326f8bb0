"""Figures for training curves, confusion matrices and latency runs."""
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

from hgrnet.evaluation import ConfusionMatrix, LatencyStats
from hgrnet.training import TrainRecord

logger = logging.getLogger(__name__)


class VisualizationService:
    """Builds chart configurations from run records and renders them as standalone HTML."""

    def training_curve_config(self, records: Sequence[TrainRecord], step: str) -> Optional[Dict[str, Any]]:
        if not records:
            return None
        df = pd.DataFrame([r.model_dump() for r in records])
        return {
            "type": "line",
            "title": f"Training: {step}",
            "x": "epoch",
            "y": ["loss", "validation_metric"],
            "data": df[["epoch", "loss", "validation_metric"]].to_dict("records"),
            "x_title": "Epoch",
            "y_title": "Loss / validation F-score",
        }

    def confusion_config(self, matrix: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        frame = matrix.to_frame(class_names)
        return {
            "type": "heatmap",
            "title": "Confusion matrix (rows: target, columns: predicted)",
            "z": frame.values.tolist(),
            "x": [str(c) for c in frame.columns],
            "y": [str(c) for c in frame.index],
            "x_title": "Predicted class",
            "y_title": "Target class",
        }

    def latency_config(self, stats: Sequence[LatencyStats]) -> Optional[Dict[str, Any]]:
        if not stats:
            return None
        rows: List[Dict[str, Any]] = []
        for s in stats:
            rows.extend({"mode": f"{s.mode} ({s.threads})", "ms": t} for t in s.timings_ms)
        return {
            "type": "box",
            "title": "Forward latency per frame",
            "x": "mode",
            "y": "ms",
            "data": rows,
            "x_title": "Kernel mode",
            "y_title": "Milliseconds",
        }

    def create_figure(self, config: Dict[str, Any]) -> Optional[go.Figure]:
        """Render a chart configuration; unsupported types yield ``None``."""
        if config["type"] == "heatmap":
            fig = px.imshow(config["z"], x=config["x"], y=config["y"], text_auto=True,
                            color_continuous_scale="Blues", title=config["title"])
        elif config["type"] == "line":
            fig = px.line(pd.DataFrame(config["data"]), x=config["x"], y=config["y"], title=config["title"])
        elif config["type"] == "box":
            fig = px.box(pd.DataFrame(config["data"]), x=config["x"], y=config["y"], title=config["title"])
        else:
            logger.warning(f"Visualization type {config['type']!r} not supported")
            return None
        fig.update_layout(xaxis_title=config["x_title"], yaxis_title=config["y_title"])
        return fig

    def write_html(self, config: Optional[Dict[str, Any]], path: Union[str, Path]) -> Optional[Path]:
        """Write a chart to ``path``; failures are logged and never abort the run."""
        if config is None:
            return None
        try:
            fig = self.create_figure(config)
            if fig is None:
                return None
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            fig.write_html(str(path), include_plotlyjs="cdn")
            logger.info(f"Wrote {config['type']} chart to {path}")
            return path
        except Exception as e:
            logger.error(f"Chart generation failed for {path}: {e}")
            return None
