"""Tests for the l2 projection and the three attack procedures."""
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from modguard.schemas.models import AttackConfig, LayerSpec
from modguard.shared.attacks import (
    attack_htrd,
    attack_twofold,
    escapes_rejection,
    htrd_objective,
    pgd_batch,
    pgd_untargeted,
    project_l2,
)
from modguard.shared.errors import NonFiniteGradientError, ShapeMismatchError
from modguard.shared.nn import build_model, default_layers, extract_features, one_hot
from modguard.shared.rejection import (
    Autoencoder,
    autoencoder_layers,
    calibrate_threshold,
    reconstruction_mse,
    svm_train,
)
from modguard.shared.training import frame_rms

BALL_TOL = 1e-6


@pytest.fixture(scope="module")
def model64(tiny_config, tiny_dataset):
    layers, feature_index = default_layers(tiny_config.train.architecture, 3, 1.0 / frame_rms(tiny_dataset))
    return build_model(layers, tiny_dataset.n, feature_index, seed=21, dtype=torch.float64)


@pytest.fixture(scope="module")
def svm64(model64, tiny_dataset):
    train = tiny_dataset.train
    features = extract_features(model64, train.samples)
    svm = svm_train(features, train.labels, gamma=0.01, num_classes=3)
    return svm.with_threshold(calibrate_threshold(svm, features, 0.10, min_samples=10))


@pytest.fixture(scope="module")
def ae64(tiny_dataset):
    layers, feature_index = autoencoder_layers(tiny_dataset.n, [16, 4, 16], 1.0 / frame_rms(tiny_dataset))
    h = Autoencoder(model=build_model(layers, tiny_dataset.n, feature_index, seed=2, dtype=torch.float64))
    mse = reconstruction_mse(h, tiny_dataset.train.samples)
    return h.with_threshold(float(np.median(mse)))


def distance(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))


class TestProjectL2:
    def test_inside_point_unchanged(self):
        x0 = np.zeros(4)
        x = np.array([0.1, 0.0, 0.0, 0.0])
        np.testing.assert_array_equal(project_l2(x, x0, 1.0), x)

    def test_outside_point_lands_on_sphere(self):
        x0 = np.ones(4)
        x = x0 + np.array([3.0, 4.0, 0.0, 0.0])
        projected = project_l2(x, x0, 1.0)
        assert distance(projected, x0) == pytest.approx(1.0)
        np.testing.assert_allclose(projected - x0, [0.6, 0.8, 0.0, 0.0])

    def test_zero_radius_returns_center(self):
        x0 = torch.ones(2, 3)
        out = project_l2(torch.zeros(2, 3), x0, 0.0)
        assert torch.equal(out, x0)
        assert out is not x0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            project_l2(np.zeros(3), np.zeros(4), 1.0)

    @given(
        st.lists(st.floats(-10, 10), min_size=6, max_size=6),
        st.lists(st.floats(-10, 10), min_size=6, max_size=6),
        st.floats(0, 5),
    )
    @settings(max_examples=200, deadline=None)
    def test_result_is_inside_ball(self, x, x0, eps):
        projected = project_l2(np.array(x), np.array(x0), eps)
        assert distance(projected, x0) <= eps + BALL_TOL


class TestPgdUntargeted:
    def test_zero_radius_is_identity(self, model64, tiny_dataset):
        x = tiny_dataset.samples[0]
        res = pgd_untargeted(model64, x, int(tiny_dataset.labels[0]), AttackConfig(epsilon=0.0))
        np.testing.assert_array_equal(res.x_adv, x.astype(np.float64))
        assert res.iters_used == 0

    def test_runs_every_iteration(self, model64, tiny_dataset):
        cfg = AttackConfig(epsilon=0.02, max_iters=7)
        res = pgd_untargeted(model64, tiny_dataset.samples[1], int(tiny_dataset.labels[1]), cfg)
        assert res.iters_used == 7
        assert len(res.objective_trace) == 7

    @given(st.integers(0, 119), st.floats(1e-4, 0.05), st.booleans())
    @settings(max_examples=40, deadline=None)
    def test_stays_in_ball(self, model64, tiny_dataset, index, eps, random_start):
        x = tiny_dataset.samples[index]
        cfg = AttackConfig(epsilon=eps, max_iters=5, random_start=random_start, seed=index)
        res = pgd_untargeted(model64, x, int(tiny_dataset.labels[index]), cfg)
        assert distance(res.x_adv, x) <= eps + BALL_TOL

    def test_single_step_on_linear_model(self):
        rng = np.random.default_rng(7)
        layers = [LayerSpec(kind="flatten"), LayerSpec(kind="dense", out=4)]
        for trial in range(100):
            model = build_model(layers, 8, 0, seed=trial, dtype=torch.float64)
            x = rng.standard_normal((2, 8))
            y = int(rng.integers(0, 4))
            eps = float(rng.uniform(0.01, 1.0))
            res = pgd_untargeted(model, x, y, AttackConfig(epsilon=eps, step_size=eps, max_iters=1))

            weight, bias = (p.detach().numpy() for p in model.parameters())
            logits = weight @ x.ravel() + bias
            p = np.exp(logits - logits.max())
            p /= p.sum()
            g = weight.T @ (p - np.eye(4)[y])
            expected = eps * g / np.linalg.norm(g)
            np.testing.assert_allclose(res.x_adv.ravel() - x.ravel(), expected, atol=1e-9)

    def test_non_finite_gradient(self, tiny_config, tiny_dataset):
        layers, feature_index = default_layers(tiny_config.train.architecture, 3, 1.0)
        model = build_model(layers, tiny_dataset.n, feature_index, dtype=torch.float64)
        with torch.no_grad():
            next(model.parameters()).fill_(float("nan"))
        with pytest.raises(NonFiniteGradientError, match="pgd_untargeted"):
            pgd_untargeted(model, tiny_dataset.samples[0], 0, AttackConfig(epsilon=0.01))


class TestPgdBatch:
    def test_zero_radius_rows_untouched(self, model64, tiny_dataset):
        x = torch.from_numpy(tiny_dataset.samples[:6]).to(torch.float64)
        eps = torch.tensor([0.0, 0.02, 0.0, 0.01, 0.03, 0.0], dtype=torch.float64)
        target = one_hot(tiny_dataset.labels[:6], 3, torch.float64)
        out = pgd_batch(model64, x, target, eps, steps=3, step_fraction=0.25)
        for i in (0, 2, 5):
            assert torch.equal(out[i], x[i])
        norms = torch.linalg.vector_norm((out - x).reshape(6, -1), dim=1)
        assert torch.all(norms <= eps + BALL_TOL)

    def test_all_zero_radii(self, model64, tiny_dataset):
        x = torch.from_numpy(tiny_dataset.samples[:3]).to(torch.float64)
        out = pgd_batch(model64, x, one_hot([0, 1, 2], 3, torch.float64), torch.zeros(3), 3, 0.25)
        assert torch.equal(out, x)


class TestEscapesRejection:
    def test_rules(self, tiny_svm):
        svm, _, _ = tiny_svm
        svm = svm.with_threshold(0.0)
        assert escapes_rejection(svm, np.array([0.1, 0.5, -1.0]), 0)
        # wrong class wins but is not above S0
        assert not escapes_rejection(svm, np.array([-0.5, -0.2, -1.0]), 0)
        # true class still wins
        assert not escapes_rejection(svm, np.array([0.9, 0.5, -1.0]), 0)


class TestAttackHtrd:
    def test_zero_radius_is_identity(self, model64, svm64, tiny_dataset):
        x = tiny_dataset.samples[3]
        res = attack_htrd(model64, svm64, x, int(tiny_dataset.labels[3]), AttackConfig(epsilon=0.0))
        np.testing.assert_array_equal(res.x_adv, x.astype(np.float64))

    @given(st.integers(0, 119), st.floats(1e-3, 0.05))
    @settings(max_examples=25, deadline=None)
    def test_stays_in_ball_and_descends(self, model64, svm64, tiny_dataset, index, eps):
        x = tiny_dataset.samples[index]
        y = int(tiny_dataset.labels[index])
        cfg = AttackConfig(epsilon=eps, max_iters=5)
        res = attack_htrd(model64, svm64, x, y, cfg)
        assert distance(res.x_adv, x) <= eps + BALL_TOL
        previous = htrd_objective(model64, svm64, x, y)
        for value in res.objective_trace:
            assert value <= previous + cfg.tol
            previous = value

    def test_success_matches_rejection_rule(self, model64, svm64, tiny_dataset):
        from modguard.shared.rejection import svm_scores

        x = tiny_dataset.samples[7]
        y = int(tiny_dataset.labels[7])
        res = attack_htrd(model64, svm64, x, y, AttackConfig(epsilon=0.05, max_iters=10))
        scores = svm_scores(svm64, extract_features(model64, res.x_adv[None])[0])
        assert res.success == escapes_rejection(svm64, scores, y)


class TestAttackTwofold:
    def test_zero_radius_is_identity(self, model64, ae64, tiny_dataset):
        x = tiny_dataset.samples[4]
        res = attack_twofold(model64, ae64, x, int(tiny_dataset.labels[4]), AttackConfig(epsilon=0.0))
        np.testing.assert_array_equal(res.x_adv, x.astype(np.float64))

    @given(st.integers(0, 119), st.floats(1e-3, 0.05), st.sampled_from(["margin", "ce"]), st.booleans())
    @settings(max_examples=25, deadline=None)
    def test_stays_in_ball(self, model64, ae64, tiny_dataset, index, eps, loss, grey_box):
        x = tiny_dataset.samples[index]
        cfg = AttackConfig(epsilon=eps, max_iters=5, twofold_loss=loss)
        res = attack_twofold(model64, ae64, x, int(tiny_dataset.labels[index]), cfg, grey_box=grey_box)
        assert distance(res.x_adv, x) <= eps + BALL_TOL

    def test_success_needs_an_unflagged_misclassification(self, model64, ae64, tiny_dataset):
        x = tiny_dataset.samples[9]
        y = int(tiny_dataset.labels[9])
        for grey_box in (False, True):
            res = attack_twofold(model64, ae64, x, y, AttackConfig(epsilon=0.05, max_iters=10), grey_box=grey_box)
            mislabeled = int(np.argmax(model64(torch.from_numpy(res.x_adv[None]))[0].detach().numpy())) != y
            unflagged = float(reconstruction_mse(ae64, res.x_adv[None])[0]) <= ae64.threshold
            assert res.success == (mislabeled and unflagged)

    def test_no_steps_when_already_fooled_and_unflagged(self, model64, ae64, tiny_dataset):
        x = tiny_dataset.samples[4]
        predicted = int(np.argmax(model64(torch.from_numpy(x[None].astype(np.float64)))[0].detach().numpy()))
        wrong = (predicted + 1) % 3
        cfg = AttackConfig(epsilon=0.05, max_iters=10)
        res = attack_twofold(model64, ae64, x, wrong, cfg, ae_threshold=1e9)
        assert res.success
        assert res.iters_used == 0
        assert res.objective_trace == ()
        np.testing.assert_array_equal(res.x_adv, x.astype(np.float64))

    def test_flagged_frames_keep_descending(self, model64, ae64, tiny_dataset):
        x = tiny_dataset.samples[4]
        predicted = int(np.argmax(model64(torch.from_numpy(x[None].astype(np.float64)))[0].detach().numpy()))
        res = attack_twofold(model64, ae64, x, (predicted + 1) % 3, AttackConfig(epsilon=0.05, max_iters=4), ae_threshold=-1.0)
        assert not res.success
        assert res.iters_used == 4

    def test_explicit_threshold_overrides(self, model64, ae64, tiny_dataset):
        x = tiny_dataset.samples[2]
        res = attack_twofold(model64, ae64, x, int(tiny_dataset.labels[2]), AttackConfig(epsilon=0.0), ae_threshold=-1.0)
        assert not res.success
