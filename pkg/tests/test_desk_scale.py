"""Desk-scale runs: robustness ordering, rejection quality and reproducibility."""
import asyncio
import json
from pathlib import Path

import numpy as np
import pytest

from modguard.config import load_experiment_config, with_derived_seeds
from modguard.schemas.models import AttackConfig
from modguard.shared.evaluation import CLEAN, DefenseUnderTest, attack_frames, evaluation_frames, read_curves_csv
from modguard.shared.nn import extract_features, load_model, predict
from modguard.shared.rejection import load_svm, svm_scores
from modguard.shared.signal import load_dataset
from modguard.shared.training import default_fixed_eps
from modguard.workers.repro_worker import ReproWorker

DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.toml"
# a single frame flip is worth 0.5% at 200 frames
NOISE_BAND = 0.03


@pytest.fixture(scope="module")
def desk_config():
    return with_derived_seeds(load_experiment_config(DESK_CONFIG))


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory, desk_config):
    root = tmp_path_factory.mktemp("desk")
    asyncio.run(ReproWorker(desk_config, root).run())
    return root


@pytest.fixture(scope="module")
def curves(desk_run):
    """variant -> {pnr_db: accuracy} over the attacked grid points."""
    return {
        c.variant: {p.pnr_db: p.accuracy for p in c.points if p.pnr_db != CLEAN}
        for c in read_curves_csv(desk_run / "curves.csv")
    }


def robust_accuracy(model_path: Path, frames, epsilon: float, cfg: AttackConfig) -> float:
    dut = DefenseUnderTest("undefended", load_model(model_path))
    outcomes = asyncio.run(attack_frames(dut, frames, np.full(len(frames), epsilon), cfg, threads=4))
    return float(np.mean([o.decision == o.label for o in outcomes]))


@pytest.mark.slow
class TestDefenseOrdering:
    def test_grid_covers_the_protocol(self, curves):
        for variant in ("undefended", "cat_dnn", "lsgna_dnn", "htrd", "lsgna_nr", "twofold"):
            assert sorted(curves[variant]) == [-20.0, -15.0, -10.0, -5.0, 0.0]

    @pytest.mark.parametrize(
        "strong, weak, from_pnr",
        [
            ("htrd", "cat_dnn", -20.0),
            ("cat_dnn", "undefended", -20.0),
            ("cat_dnn", "lsgna_dnn", -20.0),
            ("htrd", "lsgna_nr", -10.0),
            ("lsgna_nr", "twofold", -10.0),
        ],
    )
    def test_pointwise(self, curves, strong, weak, from_pnr):
        for pnr, accuracy in curves[strong].items():
            if pnr >= from_pnr:
                assert accuracy >= curves[weak][pnr] - NOISE_BAND, f"{strong} < {weak} at PNR {pnr} dB"

    def test_lsgna_is_less_robust_than_cat(self, curves):
        assert curves["lsgna_dnn"][-10.0] < curves["cat_dnn"][-10.0]


@pytest.mark.slow
class TestAttackStrength:
    @pytest.mark.parametrize("variant", ["undefended", "htrd"])
    def test_accuracy_falls_as_pnr_rises(self, curves, variant):
        grid = sorted(curves[variant])
        for low, high in zip(grid, grid[1:]):
            assert curves[variant][high] <= curves[variant][low] + NOISE_BAND

    def test_pgd_fools_more_frames_at_higher_pnr(self, curves):
        assert curves["undefended"][-10.0] < curves["undefended"][-20.0]
        assert curves["undefended"][0.0] <= curves["undefended"][-20.0]

    def test_htrd_attack_succeeds_more_at_higher_pnr(self, curves):
        assert curves["htrd"][0.0] < curves["htrd"][-20.0]

    def test_fixed_radius_training_beats_standard_training(self, desk_run, desk_config):
        dataset = load_dataset(desk_run / "data.mgd")
        frames = evaluation_frames(dataset, desk_config.eval.snr_db, desk_config.eval.n_frames)
        epsilon = default_fixed_eps(dataset.train, desk_config.adversarial)
        adversarial = robust_accuracy(desk_run / "models" / "at.mgm", frames, epsilon, desk_config.attack)
        standard = robust_accuracy(desk_run / "models" / "standard.mgm", frames, epsilon, desk_config.attack)
        assert adversarial > standard


@pytest.mark.slow
class TestRejectionAndFeatures:
    def test_htrd_keeps_clean_accuracy(self, desk_run):
        clean = json.loads((desk_run / "clean_accuracy.json").read_text())
        assert clean["n"] == 200
        assert clean["accuracy"]["htrd"] >= clean["accuracy"]["undefended"] - NOISE_BAND

    def test_cat_features_are_better_separated(self, desk_run):
        separation = json.loads((desk_run / "separation.json").read_text())
        assert separation["cat"] > separation["lsgna"]

    def test_svm_head_matches_softmax(self, desk_run):
        train = load_dataset(desk_run / "data.mgd").train
        model = load_model(desk_run / "models" / "cat.mgm")
        svm = load_svm(desk_run / "models" / "cat.mgs")
        softmax = np.mean(predict(model, train.samples) == train.labels)
        one_vs_all = np.argmax(svm_scores(svm, extract_features(model, train.samples)), axis=1)
        assert np.mean(one_vs_all == train.labels) >= softmax - 0.02


@pytest.mark.slow
class TestReproDeterminism:
    def test_two_runs_are_byte_identical(self, tiny_config, tmp_path):
        config = tiny_config.model_copy(
            update={
                "eval": tiny_config.eval.model_copy(update={"variants": ["undefended", "htrd", "twofold"]}),
                "attack": AttackConfig(max_iters=2),
            }
        )
        for name in ("a", "b"):
            asyncio.run(ReproWorker(config, tmp_path / name, threads=2).run())

        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert Path("manifest.json") in files
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), str(rel)
