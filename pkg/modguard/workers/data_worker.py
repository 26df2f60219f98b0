"""Data worker - generate and store the synthetic IQ dataset."""

import asyncio
import logging
import time
from pathlib import Path
from typing import Any, Dict

from modguard.schemas.models import ExperimentConfig
from modguard.shared.seeding import config_hash
from modguard.shared.signal import export_metadata_csv, gen_dataset, save_dataset

logger = logging.getLogger(__name__)


class DataWorker:
    """Worker for dataset generation."""

    def __init__(self, config: ExperimentConfig, out: Path):
        self.config = config
        self.out = Path(out)

    async def run(self) -> Dict[str, Any]:
        """
        Generate the dataset and write it with its metadata CSV.

        Returns:
            Dictionary with generation results
        """
        start_time = time.time()
        logger.info("Starting data worker...")

        dataset = await asyncio.to_thread(gen_dataset, self.config.dataset)
        save_dataset(dataset, self.out)
        metadata = export_metadata_csv(
            dataset, self.out.with_suffix(".csv"), config_hash(self.config), self.config.seed
        )

        duration = time.time() - start_time
        n_train = len(dataset.train)
        logger.info(
            f"Data generation complete: {len(dataset)} frames ({n_train} train), "
            f"{dataset.num_classes} classes, duration: {duration:.2f}s"
        )
        return {
            "status": "completed",
            "frames": len(dataset),
            "train_frames": n_train,
            "test_frames": len(dataset) - n_train,
            "classes": [c.name for c in dataset.classes],
            "artifacts": [str(self.out), str(metadata)],
            "duration_seconds": duration,
        }
