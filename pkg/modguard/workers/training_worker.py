"""Training worker - fit one classifier and write its checkpoint and log."""

import asyncio
import logging
import time
from pathlib import Path
from typing import Any, Dict, List

from modguard.schemas.models import EpochLog, ExperimentConfig
from modguard.shared.nn import save_model
from modguard.shared.signal import load_dataset
from modguard.shared.training import METHODS, train_method, write_training_log

logger = logging.getLogger(__name__)


class TrainingWorker:
    """Worker for classifier training."""

    def __init__(self, config: ExperimentConfig, data_path: Path, method: str, out: Path):
        if method not in METHODS:
            raise ValueError(f"Unknown training method: {method}. Must be one of: {', '.join(METHODS)}")
        self.config = config
        self.data_path = Path(data_path)
        self.method = method
        self.out = Path(out)

    @property
    def log_path(self) -> Path:
        return self.out.with_suffix(".jsonl")

    async def run(self) -> Dict[str, Any]:
        start_time = time.time()
        logger.info(f"Starting training worker ({self.method})...")

        dataset = load_dataset(self.data_path)
        history: List[EpochLog] = []
        model = await asyncio.to_thread(train_method, self.method, dataset, self.config, history)
        save_model(model, self.out)
        write_training_log(history, self.log_path)

        duration = time.time() - start_time
        last = history[-1] if history else None
        logger.info(
            f"Training complete: method={self.method}, epochs={len(history)}, "
            f"final loss={last.loss if last else float('nan'):.4f}, duration: {duration:.2f}s"
        )
        return {
            "status": "completed",
            "method": self.method,
            "epochs": len(history),
            "final_loss": last.loss if last else None,
            "final_train_accuracy": last.train_accuracy if last else None,
            "final_mean_eps": last.mean_eps if last else None,
            "artifacts": [str(self.out), str(self.log_path)],
            "duration_seconds": duration,
        }
