"""Tests for the workers, the run manifest and the command line."""
import asyncio
import json

import numpy as np
import pytest

from modguard.main import main
from modguard.schemas.models import AttackConfig
from modguard.shared.artifacts import MANIFEST_NAME, file_digest, missing_artifacts, write_manifest
from modguard.shared.codecs import read_csv
from modguard.shared.evaluation import CLEAN, read_curves_csv
from modguard.shared.nn import load_model
from modguard.shared.rejection import load_autoencoder, load_svm
from modguard.shared.signal import load_dataset
from modguard.shared.training import read_training_log
from modguard.workers.attack_worker import AttackWorker
from modguard.workers.calibration_worker import CalibrationWorker
from modguard.workers.data_worker import DataWorker
from modguard.workers.evaluation_worker import EvaluationWorker
from modguard.workers.repro_worker import ReproWorker
from modguard.workers.training_worker import TrainingWorker
from modguard.workers.viz_worker import VizWorker


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, tiny_config):
    """Dataset, standard model and SVM head shared by the downstream worker tests."""
    root = tmp_path_factory.mktemp("run")
    asyncio.run(DataWorker(tiny_config, root / "data.mgd").run())
    asyncio.run(TrainingWorker(tiny_config, root / "data.mgd", "standard", root / "standard.mgm").run())
    asyncio.run(
        CalibrationWorker(tiny_config, root / "data.mgd", "svm", root / "standard.mgs", root / "standard.mgm").run()
    )
    return root


class TestDataWorker:
    async def test_writes_dataset_and_metadata(self, tiny_config, tmp_path):
        result = await DataWorker(tiny_config, tmp_path / "d.mgd").run()
        assert result["status"] == "completed"
        assert result["frames"] == 120
        assert result["train_frames"] == 60
        assert len(load_dataset(tmp_path / "d.mgd")) == 120
        assert (tmp_path / "d.csv").exists()

    async def test_same_seed_same_bytes(self, tiny_config, tmp_path):
        await DataWorker(tiny_config, tmp_path / "a.mgd").run()
        await DataWorker(tiny_config, tmp_path / "b.mgd").run()
        assert (tmp_path / "a.mgd").read_bytes() == (tmp_path / "b.mgd").read_bytes()


class TestTrainingWorker:
    def test_writes_checkpoint_and_log(self, run_dir, tiny_config):
        model = load_model(run_dir / "standard.mgm")
        assert model.num_outputs == 3
        history = read_training_log(run_dir / "standard.jsonl")
        assert len(history) == tiny_config.train.epochs

    def test_unknown_method(self, tiny_config, tmp_path):
        with pytest.raises(ValueError):
            TrainingWorker(tiny_config, tmp_path / "d.mgd", "dropout", tmp_path / "m.mgm")


class TestCalibrationWorker:
    def test_svm_head(self, run_dir):
        svm = load_svm(run_dir / "standard.mgs")
        assert svm.num_classes == 3

    async def test_svm_reports_held_out_rejection(self, run_dir, tiny_config, tmp_path):
        worker = CalibrationWorker(tiny_config, run_dir / "data.mgd", "svm", tmp_path / "h.mgs", run_dir / "standard.mgm")
        result = await worker.run()
        assert result["validation_frames"] == 30
        assert result["test_frames"] == len(load_dataset(run_dir / "data.mgd").test) == 60
        for key in ("validation_reject_rate", "benign_reject_rate"):
            assert 0.0 <= result[key] <= 1.0
        # fraction of the 60 held-out frames
        assert result["benign_reject_rate"] * 60 == pytest.approx(round(result["benign_reject_rate"] * 60))

    async def test_autoencoder(self, run_dir, tiny_config, tmp_path):
        result = await CalibrationWorker(tiny_config, run_dir / "data.mgd", "ae", tmp_path / "ae.mga").run()
        assert load_autoencoder(tmp_path / "ae.mga").threshold == result["threshold"]
        assert 0.0 <= result["test_flag_rate"] <= 1.0

    def test_svm_needs_a_model(self, tiny_config, tmp_path):
        with pytest.raises(ValueError):
            CalibrationWorker(tiny_config, tmp_path / "d.mgd", "svm", tmp_path / "h.mgs")

    def test_unknown_kind(self, tiny_config, tmp_path):
        with pytest.raises(ValueError):
            CalibrationWorker(tiny_config, tmp_path / "d.mgd", "pca", tmp_path / "h.mgs")


class TestAttackWorker:
    async def test_exports_results_and_frames(self, run_dir, tiny_config, tmp_path):
        worker = AttackWorker(tiny_config, run_dir / "data.mgd", run_dir / "standard.mgm", "none", tmp_path, threads=2)
        result = await worker.run()
        assert result["errors"] == 0
        assert set(result["success_rates"]) == {"-10.0", "0.0"}
        _, rows = read_csv(tmp_path / "attacks.csv")
        assert len(rows) == 2 * tiny_config.eval.n_frames
        attacked = load_dataset(tmp_path / "attacks.mgd")
        assert len(attacked) == len(rows)
        assert np.all(attacked.adversarial)

    async def test_htrd_defense(self, run_dir, tiny_config, tmp_path):
        worker = AttackWorker(
            tiny_config,
            run_dir / "data.mgd",
            run_dir / "standard.mgm",
            "htrd",
            tmp_path,
            svm_path=run_dir / "standard.mgs",
            pnr_grid=[-10.0],
        )
        result = await worker.run()
        assert result["defense"] == "htrd"
        assert 0.0 <= result["success_rates"]["-10.0"] <= 1.0

    def test_unknown_defense(self, tiny_config, tmp_path):
        with pytest.raises(ValueError):
            AttackWorker(tiny_config, tmp_path / "d.mgd", tmp_path / "m.mgm", "dropout", tmp_path)


class TestEvaluationWorker:
    async def test_curve_and_accuracy_by_snr(self, run_dir, tiny_config, tmp_path):
        worker = EvaluationWorker(tiny_config, run_dir / "data.mgd", "undefended", run_dir / "standard.mgm", tmp_path)
        result = await worker.run()
        (curve,) = read_curves_csv(tmp_path / "curves.csv")
        assert [p.pnr_db for p in curve.points] == [CLEAN, -10.0, 0.0]
        assert curve.points[0].accuracy == result["accuracy"]["-inf"]
        assert (tmp_path / "curves.svg").exists()
        _, rows = read_csv(tmp_path / "accuracy_by_snr.csv")
        assert [float(r["snr_db"]) for r in rows] == [10.0]


class TestVizWorker:
    async def test_projection_files(self, run_dir, tiny_config, tmp_path):
        result = await VizWorker(tiny_config, run_dir / "data.mgd", run_dir / "standard.mgm", tmp_path).run()
        assert len(result["explained_variance"]) == 2
        separation = json.loads((tmp_path / "separation.json").read_text())
        assert separation["pca"] == pytest.approx(result["separation"])
        assert separation["seed"] == tiny_config.seed
        _, rows = read_csv(tmp_path / "pca.csv")
        assert len(rows) == result["frames"]


class TestReproWorker:
    async def test_pipeline(self, tiny_config, tmp_path):
        config = tiny_config.model_copy(
            update={
                "eval": tiny_config.eval.model_copy(update={"variants": ["undefended", "htrd", "twofold"]}),
                "attack": AttackConfig(max_iters=2),
            }
        )
        result = await ReproWorker(config, tmp_path, threads=2).run()
        assert result["variants"] == ["undefended", "htrd", "twofold"]
        assert set(result["clean_accuracy"]) == {"undefended", "htrd", "twofold"}
        assert set(result["separation"]) == {"cat", "lsgna"}
        for method in ("standard", "cat", "lsgna", "at"):
            assert (tmp_path / "models" / f"{method}.mgm").exists()
        assert missing_artifacts(result["artifacts"]) == []

        curves = read_curves_csv(tmp_path / "curves.csv")
        assert [c.variant for c in curves] == ["undefended", "htrd", "twofold"]
        manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
        listed = {entry["path"] for entry in manifest["artifacts"]}
        assert {"curves.csv", "clean_accuracy.json", "separation.json", "models/cat.mgs"} <= listed


class TestManifest:
    def test_entries_carry_size_and_digest(self, tmp_path):
        a = tmp_path / "a.txt"
        a.write_text("alpha")
        path = write_manifest(tmp_path, [a, tmp_path / "missing.txt"], "abc", 3)
        manifest = json.loads(path.read_text())
        assert manifest["config_hash"] == "abc"
        assert manifest["artifacts"] == [{"path": "a.txt", "bytes": 5, "sha256": file_digest(a)}]

    def test_missing_artifacts(self, tmp_path):
        (tmp_path / "here").write_text("")
        assert missing_artifacts([tmp_path / "here", tmp_path / "gone"]) == [str(tmp_path / "gone")]


def gen_data_args(out, seed="1"):
    return ["gen-data", "--seed", seed, "--classes", "BPSK,QPSK", "--frames-per-cell", "4", "--length", "32", "--out", str(out)]


class TestMain:
    def test_gen_data_is_reproducible(self, tmp_path):
        assert main(gen_data_args(tmp_path / "a.mgd")) == 0
        assert main(gen_data_args(tmp_path / "b.mgd")) == 0
        assert (tmp_path / "a.mgd").read_bytes() == (tmp_path / "b.mgd").read_bytes()
        assert main(gen_data_args(tmp_path / "c.mgd", seed="2")) == 0
        assert (tmp_path / "a.mgd").read_bytes() != (tmp_path / "c.mgd").read_bytes()

    def test_json_summary(self, tmp_path, capsys):
        assert main([*gen_data_args(tmp_path / "d.mgd"), "--json"]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["status"] == "completed"
        assert summary["frames"] == 8

    def test_missing_seed_is_a_usage_error(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "d.mgd")]) == 2

    def test_invalid_smoothing_cap_is_a_usage_error(self, tmp_path):
        main(gen_data_args(tmp_path / "d.mgd"))
        argv = ["train", "--data", str(tmp_path / "d.mgd"), "--method", "cat", "--seed", "1", "--c", "100", "--eps-max", "0.05"]
        assert main(argv) == 2

    def test_bad_override_is_a_usage_error(self, tmp_path):
        assert main([*gen_data_args(tmp_path / "d.mgd"), "--set", "dataset.n"]) == 2

    def test_missing_config_file_is_a_usage_error(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "nope.toml")]) == 2

    def test_runtime_failure(self, tmp_path):
        argv = ["train", "--data", str(tmp_path / "missing.mgd"), "--method", "standard", "--seed", "1"]
        assert main(argv) == 1

    def test_train_from_cli(self, tmp_path):
        main(gen_data_args(tmp_path / "d.mgd"))
        argv = ["train", "--data", str(tmp_path / "d.mgd"), "--method", "lsgna", "--seed", "1", "--epochs", "1"]
        argv += ["--set", "train.architecture.conv_filters=[4]", "--set", "train.architecture.conv_kernels=[[2, 3]]"]
        argv += ["--out", str(tmp_path / "m.mgm")]
        assert main(argv) == 0
        assert load_model(tmp_path / "m.mgm").num_outputs == 2

    def test_unknown_flag_prints_usage(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["gen-data", "--seed", "1", "--bogus"])
        assert excinfo.value.code == 2
        assert "usage:" in capsys.readouterr().err
