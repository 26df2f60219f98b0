"""Evaluation worker - security curve and clean accuracy of one defense."""

import logging
import time
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from modguard.config import settings
from modguard.schemas.models import ExperimentConfig
from modguard.shared.codecs import write_csv
from modguard.shared.evaluation import (
    CLEAN,
    accuracy_by_snr,
    evaluation_frames,
    load_defense,
    security_curve_async,
    write_curves_csv,
)
from modguard.shared.plots import plot_curves
from modguard.shared.seeding import config_hash
from modguard.shared.signal import load_dataset

logger = logging.getLogger(__name__)


class EvaluationWorker:
    """Worker for one defense variant's security curve."""

    def __init__(
        self,
        config: ExperimentConfig,
        data_path: Path,
        variant: str,
        model_path: Path,
        out_dir: Path,
        svm_path: Optional[Path] = None,
        ae_path: Optional[Path] = None,
        pnr_grid: Optional[Sequence[float]] = None,
        snr_db: Optional[float] = None,
        threads: Optional[int] = None,
    ):
        self.config = config
        self.data_path = Path(data_path)
        self.variant = variant
        self.model_path = Path(model_path)
        self.out_dir = Path(out_dir)
        self.svm_path = svm_path
        self.ae_path = ae_path
        self.pnr_grid = list(pnr_grid) if pnr_grid is not None else list(config.eval.pnr_grid)
        self.snr_db = snr_db if snr_db is not None else config.eval.snr_db
        self.threads = threads or settings.threads

    async def run(self) -> Dict[str, Any]:
        start_time = time.time()
        logger.info(f"Starting evaluation worker (variant={self.variant})...")

        dataset = load_dataset(self.data_path)
        dut = load_defense(self.variant, self.model_path, self.svm_path, self.ae_path)
        frames = evaluation_frames(dataset, self.snr_db, self.config.eval.n_frames)
        curve = await security_curve_async(
            dut, frames, [CLEAN, *self.pnr_grid], self.snr_db, self.config.attack, self.threads
        )

        h = config_hash(self.config)
        curves_csv = write_curves_csv([curve], self.out_dir / "curves.csv", h, self.config.seed)
        curves_svg = plot_curves([curve], self.out_dir / "curves.svg", title=f"SNR {self.snr_db} dB")
        by_snr = accuracy_by_snr(dut.model, dataset)
        by_snr_csv = write_csv(
            self.out_dir / "accuracy_by_snr.csv",
            ("snr_db", "n", "accuracy"),
            [(row.snr_db, row.n, row.accuracy) for row in by_snr],
            h,
            self.config.seed,
        )

        duration = time.time() - start_time
        logger.info(f"Evaluation complete: {self.variant}, duration: {duration:.2f}s")
        return {
            "status": "completed",
            "variant": self.variant,
            "frames": len(frames),
            "accuracy": {str(p.pnr_db): p.accuracy for p in curve.points},
            "artifacts": [str(curves_csv), str(curves_svg), str(by_snr_csv)],
            "duration_seconds": duration,
        }
