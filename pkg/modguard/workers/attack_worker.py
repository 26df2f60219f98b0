"""Attack worker - run white-box attacks and export the adversarial frames."""

import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from modguard.config import settings
from modguard.schemas.models import ExperimentConfig
from modguard.shared.codecs import write_csv
from modguard.shared.evaluation import attack_frames, evaluation_frames, load_defense
from modguard.shared.seeding import config_hash
from modguard.shared.signal import SPLIT_TEST, Dataset, epsilons_from_pnr, load_dataset, save_dataset

logger = logging.getLogger(__name__)

DEFENSES = {"none": "undefended", "htrd": "htrd", "twofold": "twofold"}
RESULT_HEADER = ("index", "label", "pnr_db", "epsilon", "iters", "success", "final_objective")


class AttackWorker:
    """Worker for attacking one defense over a PNR grid."""

    def __init__(
        self,
        config: ExperimentConfig,
        data_path: Path,
        model_path: Path,
        defense: str,
        out_dir: Path,
        svm_path: Optional[Path] = None,
        ae_path: Optional[Path] = None,
        pnr_grid: Optional[Sequence[float]] = None,
        snr_db: Optional[float] = None,
        threads: Optional[int] = None,
    ):
        if defense not in DEFENSES:
            raise ValueError(f"Unknown defense: {defense}. Must be one of: {', '.join(DEFENSES)}")
        self.config = config
        self.data_path = Path(data_path)
        self.model_path = Path(model_path)
        self.defense = defense
        self.out_dir = Path(out_dir)
        self.svm_path = svm_path
        self.ae_path = ae_path
        self.pnr_grid = list(pnr_grid) if pnr_grid is not None else list(config.eval.pnr_grid)
        self.snr_db = snr_db if snr_db is not None else config.eval.snr_db
        self.threads = threads or settings.threads

    async def run(self) -> Dict[str, Any]:
        start_time = time.time()
        logger.info(f"Starting attack worker (defense={self.defense})...")

        dataset = load_dataset(self.data_path)
        dut = load_defense(DEFENSES[self.defense], self.model_path, self.svm_path, self.ae_path)
        frames = evaluation_frames(dataset, self.snr_db, self.config.eval.n_frames)

        rows: List[tuple] = []
        adversarial: List[np.ndarray] = []
        success_rates: Dict[str, float] = {}
        errors = 0
        for pnr_db in self.pnr_grid:
            epsilons = epsilons_from_pnr(frames.samples, pnr_db, np.full(len(frames), self.snr_db))
            try:
                outcomes = await attack_frames(dut, frames, epsilons, self.config.attack, self.threads)
            except Exception as e:
                errors += 1
                logger.error(f"Error attacking at PNR {pnr_db} dB: {e}", exc_info=True)
                continue
            for o in outcomes:
                trace = o.result.objective_trace
                rows.append(
                    (
                        o.index,
                        o.label,
                        float(pnr_db),
                        o.epsilon,
                        o.result.iters_used,
                        int(o.result.success),
                        float(trace[-1]) if trace else "",
                    )
                )
                adversarial.append(o.result.x_adv.astype(np.float32))
            success_rates[str(pnr_db)] = float(np.mean([o.result.success for o in outcomes]))
            logger.info(f"PNR {pnr_db} dB: attack success rate {success_rates[str(pnr_db)]:.3f}")

        h = config_hash(self.config)
        csv_path = write_csv(self.out_dir / "attacks.csv", RESULT_HEADER, rows, h, self.config.seed)
        artifacts = [str(csv_path)]
        if adversarial:
            repeats = len(adversarial) // len(frames)
            attacked = Dataset(
                classes=frames.classes,
                samples=np.stack(adversarial),
                labels=np.tile(frames.labels, repeats),
                snr_db=np.tile(frames.snr_db, repeats),
                split=np.full(len(adversarial), SPLIT_TEST, dtype=np.uint8),
                adversarial=np.ones(len(adversarial), dtype=bool),
            )
            artifacts.append(str(save_dataset(attacked, self.out_dir / "attacks.mgd")))

        duration = time.time() - start_time
        logger.info(f"Attacks complete: {len(rows)} frames attacked, {errors} errors, duration: {duration:.2f}s")
        return {
            "status": "completed" if not errors else "completed_with_errors",
            "defense": self.defense,
            "frames": len(frames),
            "success_rates": success_rates,
            "errors": errors,
            "artifacts": artifacts,
            "duration_seconds": duration,
        }
