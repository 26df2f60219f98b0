"""One-off script to run the desk experiment and check the expected ordering of defenses."""
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List

from dotenv import load_dotenv

from modguard.config import load_experiment_config, settings, with_derived_seeds
from modguard.shared.evaluation import read_curves_csv
from modguard.workers.repro_worker import ReproWorker

env_path = Path(__file__).parent.parent / ".env"
load_dotenv(env_path)

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

NOISE_BAND = 0.03
DEFAULT_CONFIG = Path(__file__).parent.parent / "configs" / "desk.toml"

# (stronger, weaker, lowest PNR at which the pair is checked)
ORDERINGS = [
    ("htrd", "cat_dnn", float("-inf")),
    ("cat_dnn", "undefended", float("-inf")),
    ("cat_dnn", "lsgna_dnn", float("-inf")),
    ("htrd", "lsgna_nr", -10.0),
    ("lsgna_nr", "twofold", -10.0),
]


class OrderingVerifier:
    """Compare security curves of a finished repro run."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir

    def verify_curves(self) -> List[str]:
        curves = {c.variant: {p.pnr_db: p.accuracy for p in c.points} for c in read_curves_csv(self.out_dir / "curves.csv")}
        failures = []
        for strong, weak, from_pnr in ORDERINGS:
            if strong not in curves or weak not in curves:
                logger.warning(f"Skipping {strong} >= {weak}: variant missing from the run")
                continue
            for pnr, acc in sorted(curves[strong].items()):
                if pnr < from_pnr or pnr == float("-inf"):
                    continue
                other = curves[weak][pnr]
                ok = acc >= other - NOISE_BAND
                logger.info(f"PNR {pnr:6.1f} dB: {strong} {acc:.3f} vs {weak} {other:.3f} {'ok' if ok else 'FAILED'}")
                if not ok:
                    failures.append(f"{strong} < {weak} at PNR {pnr} dB")
        return failures

    def verify_clean_and_separation(self) -> List[str]:
        failures = []
        clean = json.loads((self.out_dir / "clean_accuracy.json").read_text())["accuracy"]
        if "htrd" in clean and "undefended" in clean:
            logger.info(f"Clean accuracy: htrd {clean['htrd']:.3f}, undefended {clean['undefended']:.3f}")
            if clean["htrd"] < clean["undefended"] - NOISE_BAND:
                failures.append("HTRD clean accuracy degrades beyond the noise band")
        separation = json.loads((self.out_dir / "separation.json").read_text())
        logger.info(f"Separation: cat {separation['cat']:.3f}, lsgna {separation['lsgna']:.3f}")
        if separation["cat"] <= separation["lsgna"]:
            failures.append("CAT features are not better separated than LS-GNA features")
        return failures

    def run_all_checks(self) -> List[str]:
        failures = self.verify_curves() + self.verify_clean_and_separation()
        logger.info("\n=== ORDERING SUMMARY ===")
        for failure in failures:
            logger.error(failure)
        logger.info(f"{len(failures)} failed checks")
        return failures


async def run(config_path: Path, out_dir: Path) -> Dict:
    config = with_derived_seeds(load_experiment_config(config_path))
    return await ReproWorker(config, out_dir).run()


def main() -> int:
    """Main entry point."""
    config_path = Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT_CONFIG
    out_dir = Path(sys.argv[2]) if len(sys.argv) > 2 else settings.output_dir / "verify_ordering"
    asyncio.run(run(config_path, out_dir))
    failures = OrderingVerifier(out_dir).run_all_checks()
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
