"""
Run-time defenses.

One-vs-all RBF-SVM neural rejection on the classifier's feature layer, with a
single global threshold S0, and the autoencoder reconstruction-error detector
of the two-fold baseline.
"""
import io
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from sklearn.metrics.pairwise import rbf_kernel
from sklearn.svm import SVC

from modguard.schemas.models import REJECT, AutoencoderConfig, LayerSpec, RejectDecision, SvmConfig
from modguard.shared.codecs import BinaryReader, check_magic, read_bytes
from modguard.shared.errors import (
    CalibrationError,
    DegenerateTrainingSetError,
    MalformedHeaderError,
    ShapeMismatchError,
    TruncatedPayloadError,
)
from modguard.shared.nn import (
    Model,
    as_input,
    build_model,
    extract_features,
    grads,
    model_from_bytes,
    model_to_bytes,
    sgd_step,
)
from modguard.shared.seeding import derive_seed
from modguard.shared.signal import Dataset, require_frames, signal_powers

logger = logging.getLogger(__name__)

SVM_MAGIC = b"MGS1"
AE_MAGIC = b"MGA1"

# libsvm stops on its max-violating-pair gap; keep it well inside the KKT tolerance we report.
SOLVER_TOL_FACTOR = 0.1
DECISION_MATCH_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class BinaryMachine:
    """One soft-margin RBF machine: S(z) = sum_i d_i exp(-gamma |z - z_i|^2) + b."""

    support_vectors: np.ndarray  # (n_sv, F); stored as float32 in MGS1
    duals: np.ndarray  # alpha_i * y_i
    bias: float
    support_indices: Optional[np.ndarray] = None  # training rows, when known

    @property
    def n_sv(self) -> int:
        return len(self.duals)

    @property
    def alphas(self) -> np.ndarray:
        return np.abs(self.duals)

    def decision(self, features: np.ndarray, gamma: float) -> np.ndarray:
        if self.n_sv == 0:
            return np.full(len(features), self.bias)
        return rbf_kernel(features, self.support_vectors, gamma=gamma) @ self.duals + self.bias


@dataclass(frozen=True, eq=False)
class SvmModel:
    """K one-vs-all machines sharing gamma and C, plus the rejection threshold S0."""

    machines: Tuple[BinaryMachine, ...]
    gamma: float
    C: float
    threshold: float = 0.0

    @property
    def num_classes(self) -> int:
        return len(self.machines)

    @property
    def feature_dim(self) -> int:
        for m in self.machines:
            if m.n_sv:
                return m.support_vectors.shape[1]
        return 0

    def with_threshold(self, threshold: float) -> "SvmModel":
        return replace(self, threshold=float(threshold))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SvmModel):
            return NotImplemented
        if (self.gamma, self.C, self.threshold, self.num_classes) != (
            other.gamma,
            other.C,
            other.threshold,
            other.num_classes,
        ):
            return False
        return all(
            a.bias == b.bias
            and np.array_equal(a.duals, b.duals)
            and np.array_equal(a.support_vectors, b.support_vectors)
            for a, b in zip(self.machines, other.machines)
        )


class KktReport(NamedTuple):
    checked: int
    violations: int
    max_violation: float


def _check_features(svm: SvmModel, features: np.ndarray) -> Tuple[np.ndarray, bool]:
    z = np.asarray(features, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != svm.feature_dim:
        raise ShapeMismatchError(
            f"Feature dimension {z.shape[1]} does not match SVM dimension {svm.feature_dim}"
        )
    return z, single


def svm_train(
    features: np.ndarray,
    labels: np.ndarray,
    gamma: float = 0.01,
    C: float = 1.0,
    tol: float = 1e-3,
    num_classes: Optional[int] = None,
) -> SvmModel:
    """Fit K one-vs-all binary machines (class k is +1, the rest -1)."""
    z = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    k_classes = int(num_classes if num_classes is not None else (y.max() + 1 if len(y) else 0))
    present = np.unique(y)
    if k_classes < 2 or len(present) < 2:
        raise DegenerateTrainingSetError(f"One-vs-all SVM needs at least 2 classes, got {present.tolist()}")
    missing = sorted(set(range(k_classes)) - set(present.tolist()))
    if missing:
        raise DegenerateTrainingSetError(f"Classes {missing} have no training features")
    if len(z) < k_classes:
        raise DegenerateTrainingSetError(f"{len(z)} samples for {k_classes} classes")

    machines: List[BinaryMachine] = []
    for k in range(k_classes):
        target = np.where(y == k, 1, -1)
        clf = SVC(kernel="rbf", gamma=gamma, C=C, tol=tol * SOLVER_TOL_FACTOR)
        clf.fit(z, target)
        machine = BinaryMachine(
            support_vectors=clf.support_vectors_.astype(np.float64),
            duals=clf.dual_coef_.ravel().astype(np.float64),
            bias=float(clf.intercept_[0]),
            support_indices=clf.support_.astype(np.int64),
        )
        reference = clf.decision_function(z)
        ours = machine.decision(z, gamma)
        gap = float(np.max(np.abs(ours - reference))) if len(z) else 0.0
        if gap > DECISION_MATCH_TOL * max(1.0, float(np.max(np.abs(reference)))):
            raise CalibrationError(f"Machine {k}: dual expansion disagrees with solver by {gap:.3g}")
        logger.debug(f"Machine {k}: {machine.n_sv} support vectors, bias {machine.bias:.4f}")
        machines.append(machine)

    return SvmModel(machines=tuple(machines), gamma=float(gamma), C=float(C))


def svm_scores(svm: SvmModel, features: np.ndarray) -> np.ndarray:
    """Decision value of every machine: (K,) for one vector, (n, K) for a batch."""
    z, single = _check_features(svm, features)
    scores = np.stack([m.decision(z, svm.gamma) for m in svm.machines], axis=1)
    return scores[0] if single else scores


def svm_input_gradient(svm: SvmModel, zeta: np.ndarray, k: int) -> np.ndarray:
    """d S_k / d zeta = sum_i -2 gamma d_i exp(-gamma |zeta - z_i|^2) (zeta - z_i)."""
    z, _ = _check_features(svm, zeta)
    z = z[0]
    machine = svm.machines[k]
    if machine.n_sv == 0:
        return np.zeros_like(z)
    diff = z[None, :] - machine.support_vectors
    weights = machine.duals * np.exp(-svm.gamma * np.sum(diff * diff, axis=1))
    return -2.0 * svm.gamma * (weights @ diff)


def decide(svm: SvmModel, scores: np.ndarray) -> np.ndarray:
    """Outcome per row of scores: argmax class (lowest id on ties) or REJECT."""
    scores = np.atleast_2d(scores)
    best = np.argmax(scores, axis=1)
    accepted = scores[np.arange(len(scores)), best] > svm.threshold
    return np.where(accepted, best, REJECT)


def classify_with_rejection(svm: SvmModel, zeta: np.ndarray) -> RejectDecision:
    scores = svm_scores(svm, np.asarray(zeta).reshape(-1))
    return RejectDecision(outcome=int(decide(svm, scores)[0]), scores=scores.tolist())


def threshold_from_scores(scores: Sequence[float], rate: float, reject_high: bool = False) -> float:
    """
    Threshold rejecting round(rate * n) of the given scores.

    Low scores are rejected (score <= threshold) unless reject_high, in which
    case high scores are flagged (score > threshold). The threshold sits at the
    midpoint of the two order statistics around the cut.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64))
    n = len(s)
    if n == 0:
        raise CalibrationError("Cannot calibrate a threshold on zero scores")
    if not 0.0 <= rate < 1.0:
        raise CalibrationError(f"Target rate must be in [0, 1), got {rate}")
    k = min(int(round(rate * n)), n - 1)
    if reject_high:
        if k == 0:
            return float(s[-1] + 1.0)
        lo, hi = s[n - k - 1], s[n - k]
    else:
        if k == 0:
            return float(s[0] - 1.0)
        lo, hi = s[k - 1], s[k]
    if lo == hi:
        logger.warning(f"Tied scores at the calibration cut ({lo}); realized rate will exceed {rate}")
    return float(lo + (hi - lo) / 2.0)


def calibrate_threshold(
    svm: SvmModel,
    benign_features: np.ndarray,
    target_reject_rate: float = 0.10,
    min_samples: int = 100,
) -> float:
    """S0 such that the target fraction of benign max-scores falls at or below it."""
    z, _ = _check_features(svm, benign_features)
    if len(z) < min_samples:
        raise CalibrationError(f"Need at least {min_samples} benign samples, got {len(z)}")
    max_scores = svm_scores(svm, z).max(axis=1)
    return threshold_from_scores(max_scores, target_reject_rate)


def kkt_violations(
    svm: SvmModel,
    k: int,
    features: np.ndarray,
    labels: np.ndarray,
    tol: float = 1e-3,
) -> KktReport:
    """Check machine k's KKT conditions on its training set."""
    machine = svm.machines[k]
    if machine.support_indices is None:
        raise ValueError("KKT check needs the support indices recorded at training time")
    z = np.asarray(features, dtype=np.float64)
    y = np.where(np.asarray(labels) == k, 1.0, -1.0)
    alpha = np.zeros(len(z))
    alpha[machine.support_indices] = machine.alphas
    margin = y * machine.decision(z, svm.gamma)

    at_zero = alpha <= 1e-12 * svm.C
    at_bound = alpha >= svm.C * (1.0 - 1e-8)
    free = ~at_zero & ~at_bound
    excess = np.zeros(len(z))
    excess[at_zero] = np.maximum(0.0, 1.0 - margin[at_zero])
    excess[free] = np.abs(margin[free] - 1.0)
    excess[at_bound] = np.maximum(0.0, margin[at_bound] - 1.0)
    return KktReport(
        checked=len(z),
        violations=int(np.sum(excess > tol)),
        max_violation=float(excess.max()) if len(z) else 0.0,
    )


class RejectionFit(NamedTuple):
    svm: SvmModel
    fit_features: np.ndarray
    fit_labels: np.ndarray
    val_features: np.ndarray
    val_labels: np.ndarray


def train_rejection_head(
    model: Model,
    d: Dataset,
    cfg: SvmConfig,
    seed: int,
) -> RejectionFit:
    """
    Fit the SVM on part of the benign training split and calibrate S0 on the rest.

    Returns the calibrated SVM with the features it was fitted and calibrated on.
    """
    train = require_frames(d.train, "training split")
    features = extract_features(model, train.samples)
    rng = np.random.default_rng(derive_seed(seed, "calibrate"))
    order = rng.permutation(len(train.labels))
    n_val = int(round(cfg.validation_fraction * len(order)))
    val_idx, fit_idx = np.sort(order[:n_val]), np.sort(order[n_val:])

    svm = svm_train(
        features[fit_idx],
        train.labels[fit_idx],
        gamma=cfg.gamma,
        C=cfg.C,
        tol=cfg.tol,
        num_classes=train.num_classes,
    )
    threshold = calibrate_threshold(
        svm, features[val_idx], cfg.reject_rate, min_samples=cfg.min_calibration
    )
    svm = svm.with_threshold(threshold)
    logger.info(
        f"Rejection head: {svm.num_classes} machines on {len(fit_idx)} frames, "
        f"S0={threshold:.5f} calibrated on {len(val_idx)} frames"
    )
    return RejectionFit(
        svm=svm,
        fit_features=features[fit_idx],
        fit_labels=train.labels[fit_idx],
        val_features=features[val_idx],
        val_labels=train.labels[val_idx],
    )


def svm_to_bytes(svm: SvmModel) -> bytes:
    out = io.BytesIO()
    out.write(SVM_MAGIC)
    out.write(struct.pack("<II", svm.num_classes, svm.feature_dim))
    out.write(struct.pack("<ddd", svm.gamma, svm.C, svm.threshold))
    for m in svm.machines:
        out.write(struct.pack("<Id", m.n_sv, m.bias))
        out.write(np.ascontiguousarray(m.duals, dtype="<f8").tobytes())
        out.write(np.ascontiguousarray(m.support_vectors, dtype="<f4").tobytes())
    return out.getvalue()


def svm_from_bytes(data: bytes, source: str = "<bytes>") -> SvmModel:
    reader = BinaryReader(data, source)
    check_magic(reader, SVM_MAGIC)
    try:
        k_classes, f_dim = reader.unpack("II", "class and feature counts")
        gamma, c, threshold = reader.unpack("ddd", "gamma, C and threshold")
    except TruncatedPayloadError as e:
        raise MalformedHeaderError(str(e)) from e
    if k_classes < 2 or gamma <= 0:
        raise MalformedHeaderError(f"{source}: invalid SVM header (K={k_classes}, gamma={gamma})")
    machines = []
    for k in range(k_classes):
        n_sv, bias = reader.unpack("Id", f"machine {k} header")
        duals = reader.array("f8", n_sv, f"machine {k} duals")
        sv = reader.array("f4", n_sv * f_dim, f"machine {k} support vectors")
        machines.append(
            BinaryMachine(
                support_vectors=sv.reshape(n_sv, f_dim).astype(np.float64),
                duals=duals.astype(np.float64),
                bias=float(bias),
            )
        )
    reader.expect_end()
    return SvmModel(machines=tuple(machines), gamma=gamma, C=c, threshold=threshold)


def save_svm(svm: SvmModel, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(svm_to_bytes(svm))
    return path


def load_svm(path: Path) -> SvmModel:
    path = Path(path)
    return svm_from_bytes(path.read_bytes(), source=str(path))


# Autoencoder detector


@dataclass(frozen=True, eq=False)
class Autoencoder:
    """Dense reconstruction network h and its MSE flag threshold."""

    model: Model
    threshold: float = 0.0

    @property
    def input_length(self) -> int:
        return self.model.input_length

    def with_threshold(self, threshold: float) -> "Autoencoder":
        return replace(self, threshold=float(threshold))


class AeDetection(NamedTuple):
    mse: float
    flagged: bool


def autoencoder_layers(n: int, hidden: Sequence[int], input_scale: float) -> Tuple[List[LayerSpec], int]:
    """flatten, scale, dense/relu stack, dense(2N), unscale; features at the narrowest layer."""
    layers = [LayerSpec(kind="flatten"), LayerSpec(kind="scale", value=input_scale)]
    bottleneck = int(np.argmin(hidden))
    feature_index = 0
    for i, width in enumerate(hidden):
        layers.append(LayerSpec(kind="dense", out=width))
        layers.append(LayerSpec(kind="relu"))
        if i == bottleneck:
            feature_index = len(layers) - 1
    layers.append(LayerSpec(kind="dense", out=2 * n))
    layers.append(LayerSpec(kind="scale", value=1.0 / input_scale))
    return layers, feature_index


def reconstruct(h: Autoencoder, x: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    xin = as_input(h.model, x)
    out, _ = h.model(xin)
    return out.reshape(xin.shape)


def reconstruction_mse(h: Autoencoder, x: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """Per-frame mean squared reconstruction error, in float64."""
    xin = as_input(h.model, x)
    with torch.no_grad():
        recon = reconstruct(h, xin)
    diff = recon.numpy().astype(np.float64) - xin.numpy().astype(np.float64)
    return np.mean(diff.reshape(len(diff), -1) ** 2, axis=1)


def ae_detect(h: Autoencoder, x: Union[np.ndarray, torch.Tensor]) -> AeDetection:
    """Flag a single frame whose reconstruction error exceeds the threshold."""
    mse = float(reconstruction_mse(h, x)[0])
    return AeDetection(mse=mse, flagged=mse > h.threshold)


def _mse_head(target: torch.Tensor):
    def head(out: torch.Tensor, _features: torch.Tensor) -> torch.Tensor:
        return torch.mean((out - target) ** 2)

    return head


def ae_train(d: Dataset, cfg: AutoencoderConfig) -> Autoencoder:
    """Train h on benign training frames and calibrate its flag threshold on held-out ones."""
    train = require_frames(d.train, "training split")
    rng = np.random.default_rng(derive_seed(cfg.seed, "calibrate", "ae"))
    order = rng.permutation(len(train))
    n_val = int(round(cfg.validation_fraction * len(train)))
    val, fit = train.subset(np.sort(order[:n_val])), train.subset(np.sort(order[n_val:]))
    require_frames(fit, "autoencoder fit split")

    rms = float(np.sqrt(np.mean(signal_powers(fit.samples)) / (2 * fit.samples.shape[2])))
    layers, feature_index = autoencoder_layers(fit.samples.shape[2], cfg.hidden, 1.0 / rms)
    model = build_model(layers, fit.samples.shape[2], feature_index, seed=derive_seed(cfg.seed, "ae", "init"))

    shuffle = np.random.default_rng(derive_seed(cfg.seed, "ae", "shuffle"))
    optimizer = None
    x_all = torch.from_numpy(fit.samples)
    for epoch in range(cfg.epochs):
        perm = shuffle.permutation(len(fit))
        total = 0.0
        for start in range(0, len(fit), cfg.batch_size):
            xb = x_all[perm[start : start + cfg.batch_size]]
            g = grads(model, xb, head=_mse_head(xb.reshape(len(xb), -1)))
            optimizer = sgd_step(model, g.d_params, cfg.lr, cfg.momentum, optimizer)
            with torch.no_grad():
                out, _ = model(xb)
                total += float(torch.sum((out - xb.reshape(len(xb), -1)) ** 2)) / out.shape[1]
        logger.info(f"Autoencoder epoch {epoch + 1}/{cfg.epochs}: mse={total / len(fit):.3e}")

    h = Autoencoder(model=model)
    if len(val) < cfg.min_calibration:
        raise CalibrationError(f"Need at least {cfg.min_calibration} benign frames, got {len(val)}")
    threshold = threshold_from_scores(reconstruction_mse(h, val.samples), cfg.flag_rate, reject_high=True)
    logger.info(f"Autoencoder threshold {threshold:.3e} calibrated on {len(val)} frames")
    return h.with_threshold(threshold)


def autoencoder_to_bytes(h: Autoencoder) -> bytes:
    return AE_MAGIC + struct.pack("<d", h.threshold) + model_to_bytes(h.model)


def autoencoder_from_bytes(data: bytes, source: str = "<bytes>") -> Autoencoder:
    reader = BinaryReader(data, source)
    check_magic(reader, AE_MAGIC)
    try:
        (threshold,) = reader.unpack("d", "threshold")
    except TruncatedPayloadError as e:
        raise MalformedHeaderError(str(e)) from e
    model = model_from_bytes(data[reader.offset :], source=f"{source} (embedded model)")
    return Autoencoder(model=model, threshold=threshold)


def save_autoencoder(h: Autoencoder, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(autoencoder_to_bytes(h))
    return path


def load_autoencoder(path: Path) -> Autoencoder:
    return autoencoder_from_bytes(read_bytes(path).data, source=str(path))
