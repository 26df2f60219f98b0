"""Shared fixtures: a tiny dataset, tiny float64 models and a small trained SVM."""
import numpy as np
import pytest
import torch

from modguard.schemas.models import (
    ArchitectureConfig,
    AttackConfig,
    AutoencoderConfig,
    DatasetConfig,
    EvalConfig,
    ExperimentConfig,
    InnerPgdConfig,
    SvmConfig,
    TrainConfig,
)
from modguard.shared.nn import build_model, default_layers, extract_features
from modguard.shared.rejection import calibrate_threshold, svm_train
from modguard.shared.signal import gen_dataset
from modguard.shared.training import frame_rms

TINY_CLASSES = ["BPSK", "QPSK", "AM-DSB"]
TINY_N = 32


@pytest.fixture(scope="session")
def tiny_config() -> ExperimentConfig:
    return ExperimentConfig(
        seed=3,
        dataset=DatasetConfig(classes=TINY_CLASSES, snr_grid=[10.0], frames_per_cell=40, n=TINY_N),
        train=TrainConfig(
            epochs=3,
            batch_size=16,
            inner_pgd=InnerPgdConfig(steps=2),
            architecture=ArchitectureConfig(conv_filters=[4], conv_kernels=[(2, 3)], feature_width=8),
        ),
        attack=AttackConfig(max_iters=5),
        svm=SvmConfig(min_calibration=10),
        autoencoder=AutoencoderConfig(hidden=[16, 4, 16], epochs=2, min_calibration=10),
        eval=EvalConfig(variants=["undefended"], pnr_grid=[-10.0, 0.0], n_frames=12),
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config):
    return gen_dataset(tiny_config.dataset)


@pytest.fixture
def tiny_model(tiny_config, tiny_dataset):
    """Untrained float64 classifier over the tiny dataset's frames."""
    layers, feature_index = default_layers(
        tiny_config.train.architecture, len(TINY_CLASSES), 1.0 / frame_rms(tiny_dataset)
    )
    return build_model(layers, TINY_N, feature_index, seed=11, dtype=torch.float64)


@pytest.fixture
def tiny_svm():
    """Three well-separated Gaussian blobs in 4-D with a calibrated threshold."""
    rng = np.random.default_rng(5)
    centers = np.array([[2.0, 0, 0, 0], [0, 2.0, 0, 0], [0, 0, 2.0, 0]])
    labels = np.repeat(np.arange(3), 40)
    features = centers[labels] + 0.3 * rng.standard_normal((len(labels), 4))
    svm = svm_train(features, labels, gamma=0.5, C=1.0)
    svm = svm.with_threshold(calibrate_threshold(svm, features, 0.10, min_samples=10))
    return svm, features, labels


@pytest.fixture
def tiny_model_svm(tiny_model, tiny_dataset):
    """An SVM fitted on the tiny model's own feature layer."""
    train = tiny_dataset.train
    features = extract_features(tiny_model, train.samples)
    svm = svm_train(features, train.labels, gamma=0.01, C=1.0, num_classes=train.num_classes)
    return svm.with_threshold(calibrate_threshold(svm, features, 0.10, min_samples=10))
