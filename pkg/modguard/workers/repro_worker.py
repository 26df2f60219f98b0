"""Repro worker - the full pipeline from one experiment config."""

import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

from modguard.config import settings
from modguard.schemas.models import ExperimentConfig, SecurityCurve
from modguard.shared.artifacts import write_json, write_manifest
from modguard.shared.codecs import write_csv
from modguard.shared.evaluation import (
    CLEAN,
    accuracy_by_snr,
    clean_report,
    evaluation_frames,
    load_defense,
    security_curve_async,
    write_curves_csv,
)
from modguard.shared.plots import plot_curves
from modguard.shared.seeding import config_hash
from modguard.shared.signal import load_dataset
from modguard.workers.calibration_worker import CalibrationWorker
from modguard.workers.data_worker import DataWorker
from modguard.workers.training_worker import TrainingWorker
from modguard.workers.viz_worker import VizWorker

logger = logging.getLogger(__name__)

# variant -> (classifier checkpoint, detector artifact)
VARIANT_COMPONENTS = {
    "undefended": ("standard", None),
    "cat_dnn": ("cat", None),
    "lsgna_dnn": ("lsgna", None),
    "htrd": ("cat", "cat.mgs"),
    "lsgna_nr": ("lsgna", "lsgna.mgs"),
    "twofold": ("at", "twofold.mga"),
    "twofold_greybox": ("at", "twofold.mga"),
}


class ReproWorker:
    """Worker chaining generation, training, calibration, evaluation and projections."""

    def __init__(self, config: ExperimentConfig, out_dir: Path, threads: Optional[int] = None):
        self.config = config
        self.out_dir = Path(out_dir)
        self.threads = threads or settings.threads
        self.artifacts: List[str] = []

    @property
    def data_path(self) -> Path:
        return self.out_dir / "data.mgd"

    def model_path(self, method: str) -> Path:
        return self.out_dir / "models" / f"{method}.mgm"

    def _variants(self) -> List[str]:
        variants = list(self.config.eval.variants)
        if self.config.eval.include_greybox and "twofold_greybox" not in variants:
            variants.append("twofold_greybox")
        return variants

    async def _step(self, worker) -> Dict[str, Any]:
        result = await worker.run()
        self.artifacts.extend(result.get("artifacts", []))
        return result

    async def run(self) -> Dict[str, Any]:
        start_time = time.time()
        logger.info(f"Starting repro worker into {self.out_dir}...")
        h = config_hash(self.config)
        seed = self.config.seed
        variants = self._variants()
        models_dir = self.out_dir / "models"

        await self._step(DataWorker(self.config, self.data_path))

        methods = sorted({VARIANT_COMPONENTS[v][0] for v in variants} | {"cat", "lsgna"})
        for method in methods:
            await self._step(TrainingWorker(self.config, self.data_path, method, self.model_path(method)))

        for method in ("cat", "lsgna"):
            await self._step(
                CalibrationWorker(
                    self.config, self.data_path, "svm", models_dir / f"{method}.mgs", self.model_path(method)
                )
            )
        if any(VARIANT_COMPONENTS[v][1] == "twofold.mga" for v in variants):
            await self._step(CalibrationWorker(self.config, self.data_path, "ae", models_dir / "twofold.mga"))

        dataset = load_dataset(self.data_path)
        frames = evaluation_frames(dataset, self.config.eval.snr_db, self.config.eval.n_frames)
        duts = {}
        for variant in variants:
            method, detector = VARIANT_COMPONENTS[variant]
            detector_path = models_dir / detector if detector else None
            duts[variant] = load_defense(
                variant,
                self.model_path(method),
                svm_path=detector_path if detector and detector.endswith(".mgs") else None,
                ae_path=detector_path if detector and detector.endswith(".mga") else None,
            )

        curves: List[SecurityCurve] = []
        grid = [CLEAN, *self.config.eval.pnr_grid]
        for variant, dut in duts.items():
            curves.append(
                await security_curve_async(dut, frames, grid, self.config.eval.snr_db, self.config.attack, self.threads)
            )
        self.artifacts.append(str(write_curves_csv(curves, self.out_dir / "curves.csv", h, seed)))
        self.artifacts.append(
            str(plot_curves(curves, self.out_dir / "curves.svg", title=f"SNR {self.config.eval.snr_db} dB"))
        )

        clean = clean_report(duts, frames)
        self.artifacts.append(
            str(write_json(self.out_dir / "clean_accuracy.json", {"n": len(frames), "accuracy": clean}, h, seed))
        )

        standard = load_defense("undefended", self.model_path("standard"))
        by_snr = accuracy_by_snr(standard.model, dataset)
        self.artifacts.append(
            str(
                write_csv(
                    self.out_dir / "accuracy_by_snr.csv",
                    ("snr_db", "n", "accuracy"),
                    [(row.snr_db, row.n, row.accuracy) for row in by_snr],
                    h,
                    seed,
                )
            )
        )

        separation = {}
        for method in ("cat", "lsgna"):
            result = await self._step(
                VizWorker(
                    self.config,
                    self.data_path,
                    self.model_path(method),
                    self.out_dir,
                    name=f"pca_{method}",
                    write_separation=False,
                )
            )
            separation[method] = result["separation"]
        self.artifacts.append(str(write_json(self.out_dir / "separation.json", separation, h, seed)))

        manifest = write_manifest(self.out_dir, [Path(p) for p in self.artifacts], h, seed)
        self.artifacts.append(str(manifest))

        duration = time.time() - start_time
        logger.info(f"Repro complete: {len(curves)} curves, {len(self.artifacts)} artifacts, duration: {duration:.2f}s")
        return {
            "status": "completed",
            "variants": variants,
            "clean_accuracy": clean,
            "curves": {c.variant: [p.accuracy for p in c.points] for c in curves},
            "separation": separation,
            "artifacts": self.artifacts,
            "duration_seconds": duration,
        }
