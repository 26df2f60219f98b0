"""Tests for label smoothing and the four training procedures."""
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from modguard.schemas.models import ArchitectureConfig, DatasetConfig, EpochLog, ModulationClass, TrainConfig
from modguard.shared.errors import DegenerateTrainingSetError, InvalidSmoothingError
from modguard.shared.nn import is_label_dist, model_to_bytes, one_hot, predict
from modguard.shared.signal import SPLIT_TRAIN, Dataset, gen_dataset
from modguard.shared.training import (
    METHODS,
    CatState,
    cat_train,
    default_eps_max,
    default_fixed_eps,
    ls_gna_train,
    read_training_log,
    smooth_label,
    train_adversarial,
    train_method,
    train_standard,
    write_training_log,
)


class TestSmoothLabel:
    def test_zero_radius_keeps_one_hot(self):
        y = one_hot([2], 4, torch.float64)
        assert torch.equal(smooth_label(y, 0.0, 10.0), y)

    def test_full_weight_is_uniform(self):
        y = one_hot([1], 4, torch.float64)
        assert torch.equal(smooth_label(y, 0.1, 10.0), torch.full((1, 4), 0.25, dtype=torch.float64))

    def test_per_row_weights(self):
        y = one_hot([0, 1], 2, torch.float64)
        out = smooth_label(y, np.array([0.0, 0.05]), 10.0)
        torch.testing.assert_close(out, torch.tensor([[1.0, 0.0], [0.25, 0.75]], dtype=torch.float64))

    def test_weight_above_one(self):
        with pytest.raises(InvalidSmoothingError):
            smooth_label(one_hot([0], 3), 0.2, 10.0)

    @given(st.integers(2, 11), st.integers(0, 10), st.floats(0.0, 0.999), st.floats(0.1, 20.0))
    @settings(max_examples=100, deadline=None)
    def test_stays_on_simplex(self, k, label, weight, c):
        y = one_hot([label % k], k, torch.float64)
        assert is_label_dist(smooth_label(y, weight / c, c))


class TestCatState:
    def test_initial(self):
        state = CatState.initial(5, eta=0.01, c=10.0, eps_max=0.05)
        assert state.mean_eps == 0.0
        assert state.eps.shape == (5,)

    def test_cap_must_keep_labels_valid(self):
        with pytest.raises(InvalidSmoothingError):
            CatState.initial(5, eta=0.01, c=10.0, eps_max=0.2)

    def test_perturbation_power(self):
        state = CatState(eps=np.array([0.1, 0.3]), eta=0.0, c=1.0, eps_max=0.5)
        assert state.mean_perturbation_power == pytest.approx(0.05)


def separable_dataset(frames_per_class: int = 40, n: int = 16) -> Dataset:
    """Two classes whose in-phase rail has opposite signs."""
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], frames_per_class)
    samples = 0.01 * rng.standard_normal((len(labels), 2, n))
    samples[:, 0, :] += np.where(labels == 0, 0.1, -0.1)[:, None]
    classes = (ModulationClass(id=0, name="BPSK"), ModulationClass(id=1, name="QPSK"))
    return Dataset(
        classes=classes,
        samples=samples.astype(np.float32),
        labels=labels.astype(np.int64),
        snr_db=np.full(len(labels), 20.0),
        split=np.full(len(labels), SPLIT_TRAIN, dtype=np.uint8),
    )


SMALL = TrainConfig(
    epochs=2,
    batch_size=16,
    architecture=ArchitectureConfig(conv_filters=[4], conv_kernels=[(2, 3)], feature_width=8),
)


class TestTrainStandard:
    def test_separable_data(self):
        d = separable_dataset()
        cfg = SMALL.model_copy(update={"epochs": 50, "lr": 0.05})
        history = []
        model = train_standard(d, cfg, history)
        assert np.mean(predict(model, d.samples) == d.labels) >= 0.99
        assert len(history) == 50
        assert history[-1].loss < history[0].loss

    def test_deterministic(self, tiny_dataset):
        a = train_standard(tiny_dataset, SMALL)
        b = train_standard(tiny_dataset, SMALL)
        assert model_to_bytes(a) == model_to_bytes(b)

    def test_single_class(self):
        d = separable_dataset()
        with pytest.raises(DegenerateTrainingSetError):
            train_standard(d.subset(range(40)), SMALL)


class TestDegenerateBudgets:
    def test_zero_radius_adversarial_training_is_standard(self, tiny_dataset):
        standard = train_standard(tiny_dataset, SMALL)
        adversarial = train_adversarial(tiny_dataset, SMALL, fixed_eps=0.0)
        assert model_to_bytes(adversarial) == model_to_bytes(standard)

    def test_zero_increment_cat_is_standard(self, tiny_dataset):
        state = CatState.initial(len(tiny_dataset.train), eta=0.0, c=10.0, eps_max=0.05)
        cat = cat_train(tiny_dataset, SMALL, state)
        assert model_to_bytes(cat) == model_to_bytes(train_standard(tiny_dataset, SMALL))
        assert np.all(state.eps == 0)

    def test_noise_free_unsmoothed_lsgna_is_standard(self, tiny_dataset):
        lsgna = ls_gna_train(tiny_dataset, SMALL, noise_sigma=0.0, smooth_alpha=0.0)
        assert model_to_bytes(lsgna) == model_to_bytes(train_standard(tiny_dataset, SMALL))


class TestCatTrain:
    def test_radii_stay_in_range(self, tiny_dataset):
        state = CatState.initial(len(tiny_dataset.train), eta=0.004, c=10.0, eps_max=0.01)
        history = []
        cat_train(tiny_dataset, SMALL, state, history)
        assert np.all(state.eps >= 0)
        assert np.all(state.eps <= 0.01)
        assert history[-1].mean_eps == pytest.approx(state.mean_eps)
        assert history[-1].method == "cat"

    def test_each_visit_moves_a_radius_by_one_step_at_most(self, tiny_dataset):
        eta, eps_max = 0.001, 0.002
        snapshots = []

        class RecordingState(CatState):
            @property
            def mean_eps(self) -> float:
                snapshots.append(self.eps.copy())
                return float(np.mean(self.eps))

        state = RecordingState(eps=np.zeros(len(tiny_dataset.train)), eta=eta, c=10.0, eps_max=eps_max)
        cat_train(tiny_dataset, SMALL.model_copy(update={"epochs": 6}), state)

        assert len(snapshots) == 6
        # every sample is visited once per epoch
        trajectory = np.stack([np.zeros(len(state.eps)), *snapshots])
        steps = np.diff(trajectory, axis=0)
        allowed = np.isclose(steps[..., None], [-eta, 0.0, eta], rtol=0.0, atol=1e-12).any(axis=-1)
        assert np.all(allowed)
        assert np.all(trajectory <= eps_max)
        assert np.any(np.isclose(trajectory, eps_max, rtol=0.0, atol=1e-12))

    def test_radii_grow_for_robust_samples(self, tiny_dataset):
        state = CatState.initial(len(tiny_dataset.train), eta=0.001, c=10.0, eps_max=0.05)
        cat_train(tiny_dataset, SMALL, state)
        assert state.mean_eps > 0

    def test_state_must_match_split(self, tiny_dataset):
        with pytest.raises(ValueError):
            cat_train(tiny_dataset, SMALL, CatState.initial(3, eta=0.01, c=1.0, eps_max=0.1))


class TestLsGna:
    def test_invalid_parameters(self, tiny_dataset):
        with pytest.raises(InvalidSmoothingError):
            ls_gna_train(tiny_dataset, SMALL, noise_sigma=-1.0, smooth_alpha=0.1)
        with pytest.raises(InvalidSmoothingError):
            ls_gna_train(tiny_dataset, SMALL, noise_sigma=0.0, smooth_alpha=1.5)

    def test_noise_changes_the_model(self, tiny_dataset):
        noisy = ls_gna_train(tiny_dataset, SMALL, noise_sigma=0.001, smooth_alpha=0.1)
        assert model_to_bytes(noisy) != model_to_bytes(train_standard(tiny_dataset, SMALL))


class TestDefaults:
    def test_eps_max_is_half_the_median_norm(self, tiny_config, tiny_dataset):
        # frames are normalized to ||x||^2 = 0.01
        assert default_eps_max(tiny_dataset.train, tiny_config.cat) == pytest.approx(0.05, rel=1e-5)

    def test_fixed_eps_from_pnr(self, tiny_config, tiny_dataset):
        expected = np.sqrt(0.1 * 0.01 / 11.0)
        assert default_fixed_eps(tiny_dataset.train, tiny_config.adversarial) == pytest.approx(expected, rel=1e-5)


class TestTrainMethod:
    @pytest.mark.parametrize("method", METHODS)
    def test_every_method_trains(self, method, tiny_config, tiny_dataset):
        config = tiny_config.model_copy(update={"train": SMALL.model_copy(update={"epochs": 1})})
        history = []
        model = train_method(method, tiny_dataset, config, history)
        assert model.num_outputs == 3
        assert [h.method for h in history] == [method]

    def test_unknown_method(self, tiny_config, tiny_dataset):
        with pytest.raises(ValueError):
            train_method("dropout", tiny_dataset, tiny_config)


class TestTrainingLog:
    def test_round_trip(self, tmp_path):
        history = [
            EpochLog(method="cat", epoch=1, loss=1.5, train_accuracy=0.4, mean_eps=0.01, mean_perturbation_power=1e-4),
            EpochLog(method="cat", epoch=2, loss=1.2, train_accuracy=0.5, mean_eps=0.02, mean_perturbation_power=4e-4),
        ]
        path = write_training_log(history, tmp_path / "log.jsonl")
        assert read_training_log(path) == history
        assert len(path.read_text().splitlines()) == 2


@pytest.mark.slow
class TestDeskScaleTraining:
    def test_clean_accuracy_at_snr_10(self):
        d = gen_dataset(DatasetConfig(snr_grid=[10.0], frames_per_cell=200, seed=1))
        model = train_standard(d, TrainConfig(epochs=30))
        test = d.test
        assert np.mean(predict(model, test.samples) == test.labels) >= 0.70
