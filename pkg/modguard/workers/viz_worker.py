"""Viz worker - PCA projection and class separation of a model's feature layer."""

import logging
import time
from pathlib import Path
from typing import Any, Dict, Optional

from modguard.schemas.models import ExperimentConfig
from modguard.shared.artifacts import write_json
from modguard.shared.evaluation import evaluation_frames, pca_project, separation_score, write_projection_csv
from modguard.shared.nn import extract_features, load_model
from modguard.shared.plots import plot_projection
from modguard.shared.seeding import config_hash
from modguard.shared.signal import load_dataset

logger = logging.getLogger(__name__)


class VizWorker:
    """Worker for feature-space projections."""

    def __init__(
        self,
        config: ExperimentConfig,
        data_path: Path,
        model_path: Path,
        out_dir: Path,
        dims: Optional[int] = None,
        name: str = "pca",
        write_separation: bool = True,
    ):
        self.config = config
        self.data_path = Path(data_path)
        self.model_path = Path(model_path)
        self.out_dir = Path(out_dir)
        self.dims = dims or config.eval.pca_dims
        self.name = name
        self.write_separation = write_separation

    async def run(self) -> Dict[str, Any]:
        start_time = time.time()
        logger.info(f"Starting viz worker ({self.name})...")

        dataset = load_dataset(self.data_path)
        model = load_model(self.model_path)
        frames = evaluation_frames(dataset, self.config.eval.snr_db, len(dataset))
        features = extract_features(model, frames.samples)
        projection = pca_project(features, self.dims)
        separation = separation_score(features, frames.labels)

        h = config_hash(self.config)
        artifacts = [
            str(write_projection_csv(projection, frames.labels, self.out_dir / f"{self.name}.csv", h, self.config.seed)),
            str(
                plot_projection(
                    projection.coords,
                    frames.labels,
                    [c.name for c in frames.classes],
                    self.out_dir / f"{self.name}.svg",
                    title=self.model_path.stem,
                )
            ),
        ]
        if self.write_separation:
            path = write_json(
                self.out_dir / "separation.json", {self.name: separation}, h, self.config.seed
            )
            artifacts.append(str(path))

        duration = time.time() - start_time
        logger.info(f"Projection complete: separation={separation:.4f}, duration: {duration:.2f}s")
        return {
            "status": "completed",
            "frames": len(frames),
            "separation": separation,
            "explained_variance": projection.explained.tolist(),
            "artifacts": artifacts,
            "duration_seconds": duration,
        }
