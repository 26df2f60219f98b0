"""Calibration worker - fit a run-time detector and calibrate its threshold."""

import asyncio
import logging
import time
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from modguard.schemas.models import REJECT, ExperimentConfig
from modguard.shared.nn import extract_features, load_model
from modguard.shared.rejection import (
    ae_train,
    decide,
    kkt_violations,
    reconstruction_mse,
    save_autoencoder,
    save_svm,
    svm_scores,
    train_rejection_head,
)
from modguard.shared.signal import load_dataset

logger = logging.getLogger(__name__)

KINDS = ("svm", "ae")


class CalibrationWorker:
    """Worker for SVM rejection heads and autoencoder detectors."""

    def __init__(
        self,
        config: ExperimentConfig,
        data_path: Path,
        kind: str,
        out: Path,
        model_path: Optional[Path] = None,
    ):
        if kind not in KINDS:
            raise ValueError(f"Unknown detector kind: {kind}. Must be one of: svm, ae")
        if kind == "svm" and model_path is None:
            raise ValueError("SVM calibration needs --model")
        self.config = config
        self.data_path = Path(data_path)
        self.kind = kind
        self.out = Path(out)
        self.model_path = Path(model_path) if model_path is not None else None

    async def run(self) -> Dict[str, Any]:
        start_time = time.time()
        logger.info(f"Starting calibration worker ({self.kind})...")
        dataset = load_dataset(self.data_path)

        if self.kind == "svm":
            result = await asyncio.to_thread(self._calibrate_svm, dataset)
        else:
            result = await asyncio.to_thread(self._calibrate_ae, dataset)

        duration = time.time() - start_time
        logger.info(f"Calibration complete: {result}, duration: {duration:.2f}s")
        return {
            "status": "completed",
            "kind": self.kind,
            **result,
            "artifacts": [str(self.out)],
            "duration_seconds": duration,
        }

    def _calibrate_svm(self, dataset) -> Dict[str, Any]:
        model = load_model(self.model_path)
        fit = train_rejection_head(model, dataset, self.config.svm, self.config.seed)
        save_svm(fit.svm, self.out)

        val_outcomes = decide(fit.svm, svm_scores(fit.svm, fit.val_features))
        test = dataset.test
        reject_rate = None
        if len(test):
            test_outcomes = decide(fit.svm, svm_scores(fit.svm, extract_features(model, test.samples)))
            reject_rate = float(np.mean(test_outcomes == REJECT))
            logger.info(f"Benign rejection on {len(test)} held-out test frames: {reject_rate:.3f}")
        violations = 0
        worst = 0.0
        for k in range(fit.svm.num_classes):
            report = kkt_violations(fit.svm, k, fit.fit_features, fit.fit_labels, self.config.svm.tol)
            violations += report.violations
            worst = max(worst, report.max_violation)
        if violations:
            logger.warning(f"{violations} KKT violations above {self.config.svm.tol} (max {worst:.3g})")
        return {
            "threshold": fit.svm.threshold,
            "support_vectors": int(sum(m.n_sv for m in fit.svm.machines)),
            "validation_frames": len(fit.val_labels),
            "validation_reject_rate": float(np.mean(val_outcomes == REJECT)),
            "benign_reject_rate": reject_rate,
            "test_frames": len(test),
            "kkt_violations": violations,
            "kkt_max_violation": worst,
        }

    def _calibrate_ae(self, dataset) -> Dict[str, Any]:
        h = ae_train(dataset, self.config.autoencoder)
        save_autoencoder(h, self.out)
        test = dataset.test
        flag_rate = float(np.mean(reconstruction_mse(h, test.samples) > h.threshold)) if len(test) else None
        return {"threshold": h.threshold, "test_flag_rate": flag_rate}
