"""Training procedures: standard, fixed-radius adversarial, CAT and LS-GNA."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import torch

from modguard.schemas.models import (
    AdversarialConfig,
    CatConfig,
    EpochLog,
    ExperimentConfig,
    LsGnaConfig,
    TrainConfig,
)
from modguard.shared.attacks import pgd_batch
from modguard.shared.errors import DegenerateTrainingSetError, InvalidSmoothingError
from modguard.shared.nn import Model, build_model, default_layers, grads, one_hot, sgd_step
from modguard.shared.seeding import derive_seed
from modguard.shared.signal import Dataset, epsilons_from_pnr, require_frames, signal_powers

logger = logging.getLogger(__name__)

# (model, batch indices, inputs, one-hot targets) -> (training inputs, target distributions)
Perturb = Callable[[Model, np.ndarray, torch.Tensor, torch.Tensor], Tuple[torch.Tensor, torch.Tensor]]
AfterStep = Callable[[Model, np.ndarray, torch.Tensor, torch.Tensor], None]


def smooth_label(
    y: Union[torch.Tensor, np.ndarray],
    eps_i: Union[float, torch.Tensor, np.ndarray],
    c: float,
) -> torch.Tensor:
    """(1 - c eps_i) y + c eps_i u with u uniform over the K classes."""
    y = torch.as_tensor(y)
    weight = c * torch.as_tensor(eps_i, dtype=torch.float64)
    if bool(torch.any(weight > 1.0)) or bool(torch.any(weight < 0.0)):
        raise InvalidSmoothingError(
            f"c * eps_i must lie in [0, 1], got max {float(weight.max()):.6g}"
        )
    if weight.dim() == 1:
        weight = weight[:, None]
    k = y.shape[-1]
    smoothed = (1.0 - weight) * y.to(torch.float64) + weight * (1.0 / k)
    return smoothed.to(y.dtype if y.is_floating_point() else torch.float32)


@dataclass
class CatState:
    """Per-sample adaptive radii of customized adversarial training."""

    eps: np.ndarray
    eta: float
    c: float
    eps_max: float

    def __post_init__(self):
        if self.c * self.eps_max > 1.0:
            raise InvalidSmoothingError(
                f"c * eps_max = {self.c * self.eps_max:.6g} exceeds 1; smoothed labels would be invalid"
            )
        self.eps = np.asarray(self.eps, dtype=np.float64)

    @classmethod
    def initial(cls, n_samples: int, eta: float, c: float, eps_max: float) -> "CatState":
        return cls(eps=np.zeros(n_samples), eta=eta, c=c, eps_max=eps_max)

    @property
    def mean_eps(self) -> float:
        return float(np.mean(self.eps)) if len(self.eps) else 0.0

    @property
    def mean_perturbation_power(self) -> float:
        return float(np.mean(self.eps**2)) if len(self.eps) else 0.0


def frame_rms(d: Dataset) -> float:
    """Per-entry RMS amplitude over all frames."""
    return float(np.sqrt(np.mean(signal_powers(d.samples)) / (2 * d.samples.shape[2])))


def default_eps_max(train: Dataset, cfg: CatConfig) -> float:
    if cfg.eps_max is not None:
        return cfg.eps_max
    return float(cfg.eps_max_fraction * np.median(np.sqrt(signal_powers(train.samples))))


def default_noise_sigma(train: Dataset, cfg: LsGnaConfig) -> float:
    if cfg.noise_sigma is not None:
        return cfg.noise_sigma
    return cfg.noise_fraction * frame_rms(train)


def default_fixed_eps(train: Dataset, cfg: AdversarialConfig) -> float:
    if cfg.fixed_eps is not None:
        return cfg.fixed_eps
    return float(np.median(epsilons_from_pnr(train.samples, cfg.pnr_db, train.snr_db)))


def initial_model(train: Dataset, cfg: TrainConfig) -> Model:
    """Default architecture with its input scale fitted to the training frames."""
    rms = frame_rms(train)
    layers, feature_index = default_layers(
        cfg.architecture, train.num_classes, 1.0 / rms if rms > 0 else 1.0
    )
    return build_model(layers, train.samples.shape[2], feature_index, seed=derive_seed(cfg.seed, "train", "init"))


def _training_split(d: Dataset) -> Dataset:
    train = require_frames(d.train, "training split")
    if len(np.unique(train.labels)) < 2:
        raise DegenerateTrainingSetError("Training split holds a single class")
    return train


def _fit(
    method: str,
    train: Dataset,
    cfg: TrainConfig,
    perturb: Perturb,
    after_step: Optional[AfterStep] = None,
    epoch_stats: Optional[Callable[[], Tuple[float, float]]] = None,
    history: Optional[List[EpochLog]] = None,
) -> Model:
    """Mini-batch SGD with momentum; the batch order is shared by every method."""
    model = initial_model(train, cfg)
    shuffle = np.random.default_rng(derive_seed(cfg.seed, "train", "shuffle"))
    x_all = torch.from_numpy(train.samples)
    y_all = torch.from_numpy(train.labels)
    optimizer = None

    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(train))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(train), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            x_in, target = perturb(model, idx, xb, one_hot(yb, train.num_classes, model.dtype))

            g = grads(model, x_in, target)
            if not np.isfinite(g.value):
                logger.warning(f"{method}: non-finite loss at epoch {epoch + 1}, batch {start // cfg.batch_size}")
            optimizer = sgd_step(model, g.d_params, cfg.lr, cfg.momentum, optimizer)
            total_loss += g.value * len(idx)

            with torch.no_grad():
                logits, _ = model(x_in)
            correct += int(torch.sum(torch.argmax(logits, dim=1) == yb))
            if after_step is not None:
                after_step(model, idx, x_in, yb)

        mean_eps, power = epoch_stats() if epoch_stats is not None else (0.0, 0.0)
        record = EpochLog(
            method=method,
            epoch=epoch + 1,
            loss=total_loss / len(train),
            train_accuracy=correct / len(train),
            mean_eps=mean_eps,
            mean_perturbation_power=power,
        )
        logger.info(
            f"{method} epoch {record.epoch}/{cfg.epochs}: loss={record.loss:.4f} "
            f"acc={record.train_accuracy:.3f} mean_eps={record.mean_eps:.5f}"
        )
        if history is not None:
            history.append(record)
    return model


def train_standard(d: Dataset, cfg: TrainConfig, history: Optional[List[EpochLog]] = None) -> Model:
    """Cross-entropy training on the clean training split."""
    train = _training_split(d)
    return _fit("standard", train, cfg, lambda model, idx, xb, target: (xb, target), history=history)


def train_adversarial(
    d: Dataset,
    cfg: TrainConfig,
    fixed_eps: float,
    history: Optional[List[EpochLog]] = None,
) -> Model:
    """Replace each batch by its PGD counterpart at radius fixed_eps before the SGD step."""
    if fixed_eps < 0:
        raise ValueError(f"fixed_eps must be non-negative, got {fixed_eps}")
    train = _training_split(d)

    def perturb(model, idx, xb, target):
        eps = torch.full((len(idx),), fixed_eps, dtype=torch.float64)
        x_adv = pgd_batch(model, xb, target, eps, cfg.inner_pgd.steps, cfg.inner_pgd.step_fraction)
        return x_adv, target

    return _fit("at", train, cfg, perturb, epoch_stats=lambda: (fixed_eps, fixed_eps**2), history=history)


def cat_train(
    d: Dataset,
    cfg: TrainConfig,
    cat: CatState,
    history: Optional[List[EpochLog]] = None,
) -> Model:
    """
    Customized adversarial training.

    Per batch: raise every eps_i by eta, attack at that radius against a label
    smoothed with the previous eps_i, cap eps_i at eps_max, take the SGD step on
    labels smoothed with the capped eps_i, then lower eps_i by eta for samples
    the updated model still misclassifies.
    """
    train = _training_split(d)
    if len(cat.eps) != len(train):
        raise ValueError(f"CatState tracks {len(cat.eps)} samples, training split has {len(train)}")
    pending = {}

    def perturb(model, idx, xb, target):
        eps_pre = cat.eps[idx]
        eps_inc = eps_pre + cat.eta
        inner_target = smooth_label(target, eps_pre, cat.c)
        x_adv = pgd_batch(
            model,
            xb,
            inner_target,
            torch.from_numpy(eps_inc),
            cfg.inner_pgd.steps,
            cfg.inner_pgd.step_fraction,
        )
        eps_cap = np.minimum(cat.eps_max, eps_inc)
        pending["pre"], pending["inc"], pending["cap"] = eps_pre, eps_inc, eps_cap
        cat.eps[idx] = eps_cap
        return x_adv, smooth_label(target, eps_cap, cat.c)

    def after_step(model, idx, x_in, yb):
        with torch.no_grad():
            logits, _ = model(x_in)
        fooled = (torch.argmax(logits, dim=1) != yb).numpy()
        # an uncapped visit falls back to the exact pre-increment value
        lowered = np.where(
            pending["inc"] <= cat.eps_max,
            pending["pre"],
            np.clip(pending["cap"] - cat.eta, 0.0, cat.eps_max),
        )
        cat.eps[idx] = np.where(fooled, lowered, pending["cap"])

    return _fit(
        "cat",
        train,
        cfg,
        perturb,
        after_step=after_step,
        epoch_stats=lambda: (cat.mean_eps, cat.mean_perturbation_power),
        history=history,
    )


def ls_gna_train(
    d: Dataset,
    cfg: TrainConfig,
    noise_sigma: float,
    smooth_alpha: float,
    history: Optional[List[EpochLog]] = None,
) -> Model:
    """Gaussian-noise augmentation with uniformly smoothed targets."""
    if noise_sigma < 0 or not 0.0 <= smooth_alpha <= 1.0:
        raise InvalidSmoothingError(f"Invalid LS-GNA parameters sigma={noise_sigma}, alpha={smooth_alpha}")
    train = _training_split(d)
    noise = np.random.default_rng(derive_seed(cfg.seed, "train", "noise"))

    def perturb(model, idx, xb, target):
        if noise_sigma > 0:
            draw = noise.standard_normal(tuple(xb.shape))
            xb = xb + torch.from_numpy(noise_sigma * draw).to(xb.dtype)
        if smooth_alpha > 0:
            target = ((1.0 - smooth_alpha) * target + smooth_alpha / target.shape[1]).to(target.dtype)
        return xb, target

    return _fit("lsgna", train, cfg, perturb, history=history)


def write_training_log(history: List[EpochLog], path: Path) -> Path:
    """JSON-lines training log, one EpochLog per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(record.model_dump_json() + "\n" for record in history), encoding="utf-8")
    return path


def read_training_log(path: Path) -> List[EpochLog]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [EpochLog.model_validate_json(line) for line in lines if line.strip()]


METHODS = ("standard", "at", "cat", "lsgna")


def train_method(
    method: str,
    d: Dataset,
    config: ExperimentConfig,
    history: Optional[List[EpochLog]] = None,
) -> Model:
    """Train with one of METHODS using the experiment's hyperparameters and defaults."""
    train = _training_split(d)
    if method == "standard":
        return train_standard(d, config.train, history)
    if method == "at":
        fixed_eps = default_fixed_eps(train, config.adversarial)
        logger.info(f"Adversarial training at fixed eps={fixed_eps:.5f}")
        return train_adversarial(d, config.train, fixed_eps, history)
    if method == "cat":
        eps_max = default_eps_max(train, config.cat)
        state = CatState.initial(len(train), config.cat.eta, config.cat.c, eps_max)
        logger.info(f"CAT with eta={state.eta}, c={state.c}, eps_max={eps_max:.5f}")
        return cat_train(d, config.train, state, history)
    if method == "lsgna":
        sigma = default_noise_sigma(train, config.lsgna)
        logger.info(f"LS-GNA with sigma={sigma:.5f}, alpha={config.lsgna.smooth_alpha}")
        return ls_gna_train(d, config.train, sigma, config.lsgna.smooth_alpha, history)
    raise ValueError(f"Unknown training method: {method}")
