"""Pydantic models for modguard configuration and result records."""
import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

MODULATIONS: Tuple[str, ...] = (
    "BPSK",
    "QPSK",
    "8PSK",
    "QAM16",
    "QAM64",
    "CPFSK",
    "GFSK",
    "PAM4",
    "WBFM",
    "AM-SSB",
    "AM-DSB",
)

VARIANTS: Tuple[str, ...] = (
    "undefended",
    "cat_dnn",
    "lsgna_dnn",
    "htrd",
    "lsgna_nr",
    "twofold",
)

# Outcome code of a rejected decision.
REJECT = -1


class ModulationClass(BaseModel):
    """A modulation scheme and its contiguous 0-based class id."""

    model_config = ConfigDict(frozen=True)

    id: int = Field(ge=0)
    name: str

    @field_validator("name")
    @classmethod
    def _known_name(cls, value: str) -> str:
        if value not in MODULATIONS:
            raise ValueError(f"Unsupported modulation: {value}")
        return value


class DatasetConfig(BaseModel):
    """Synthetic dataset generation parameters."""

    classes: List[str] = Field(default_factory=lambda: list(MODULATIONS))
    snr_grid: List[float] = Field(default_factory=lambda: [10.0])
    frames_per_cell: int = Field(default=200, ge=2)
    n: int = Field(default=128, ge=16)
    split_ratio: float = Field(default=0.5, gt=0.0, lt=1.0)
    seed: int = 0
    frame_energy: float = Field(default=0.01, gt=0.0)
    samples_per_symbol: int = Field(default=8, ge=2)
    rolloff: float = Field(default=0.35, gt=0.0, le=1.0)

    @field_validator("classes")
    @classmethod
    def _valid_classes(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("Dataset needs at least one modulation class")
        if len(set(value)) != len(value):
            raise ValueError(f"Duplicate modulation classes: {value}")
        for name in value:
            if name not in MODULATIONS:
                raise ValueError(f"Unsupported modulation: {name}")
        return value

    @field_validator("snr_grid")
    @classmethod
    def _valid_snrs(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("Dataset needs at least one SNR level")
        if len(set(value)) != len(value):
            raise ValueError(f"Duplicate SNR levels: {value}")
        return value

    def modulation_classes(self) -> List[ModulationClass]:
        """Class list with contiguous ids in config order."""
        return [ModulationClass(id=i, name=name) for i, name in enumerate(self.classes)]


class LayerSpec(BaseModel):
    """One tagged layer of a sequential model."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["scale", "conv", "relu", "flatten", "dense"]
    out: int = 0
    kh: int = 0
    kw: int = 0
    value: float = 1.0

    @model_validator(mode="after")
    def _shape_fields(self) -> "LayerSpec":
        if self.kind == "conv" and (self.out < 1 or self.kh < 1 or self.kw < 1):
            raise ValueError("conv layers need positive out, kh and kw")
        if self.kind == "dense" and self.out < 1:
            raise ValueError("dense layers need a positive out")
        if self.kind == "scale" and not math.isfinite(self.value):
            raise ValueError("scale layers need a finite value")
        return self


class ArchitectureConfig(BaseModel):
    """Desk-scale convolutional classifier topology."""

    conv_filters: List[int] = Field(default_factory=lambda: [16, 8])
    conv_kernels: List[Tuple[int, int]] = Field(default_factory=lambda: [(1, 3), (2, 3)])
    feature_width: int = Field(default=32, ge=1)
    auto_scale: bool = True

    @model_validator(mode="after")
    def _paired(self) -> "ArchitectureConfig":
        if len(self.conv_filters) != len(self.conv_kernels):
            raise ValueError("conv_filters and conv_kernels must have equal length")
        return self


class InnerPgdConfig(BaseModel):
    """Inner maximizer of adversarial training."""

    steps: int = Field(default=10, ge=1)
    step_fraction: float = Field(default=0.25, gt=0.0)


class TrainConfig(BaseModel):
    """Mini-batch SGD parameters shared by every training procedure."""

    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=0.01, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    inner_pgd: InnerPgdConfig = Field(default_factory=InnerPgdConfig)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    seed: int = 0


class CatConfig(BaseModel):
    """Customized adversarial training schedule."""

    eta: float = Field(default=0.005, ge=0.0)
    c: float = Field(default=10.0, ge=0.0)
    eps_max: Optional[float] = Field(default=None, ge=0.0)
    eps_max_fraction: float = Field(default=0.5, ge=0.0)

    @model_validator(mode="after")
    def _valid_smoothing(self) -> "CatConfig":
        if self.eps_max is not None and self.c * self.eps_max > 1.0:
            raise ValueError(
                f"c * eps_max must not exceed 1 (got {self.c} * {self.eps_max} = "
                f"{self.c * self.eps_max:.4g}); smoothed labels would leave the simplex"
            )
        return self


class LsGnaConfig(BaseModel):
    """Label smoothing with Gaussian noise augmentation."""

    noise_sigma: Optional[float] = Field(default=None, ge=0.0)
    noise_fraction: float = Field(default=0.05, ge=0.0)
    smooth_alpha: float = Field(default=0.1, ge=0.0, le=1.0)


class AdversarialConfig(BaseModel):
    """Fixed-radius adversarial training (the two-fold defense's retrained CNN)."""

    fixed_eps: Optional[float] = Field(default=None, ge=0.0)
    pnr_db: float = -10.0


class AttackConfig(BaseModel):
    """l2 PGD parameters: radius, step size, iteration cap and convergence tolerance."""

    epsilon: float = Field(default=0.0, ge=0.0)
    step_size: Optional[float] = Field(default=None, gt=0.0)
    step_fraction: float = Field(default=0.1, gt=0.0)
    max_iters: int = Field(default=50, ge=1)
    tol: float = Field(default=1e-5, gt=0.0)
    normalize_step: bool = True
    random_start: bool = False
    twofold_loss: Literal["margin", "ce"] = "margin"
    seed: int = 0

    @property
    def xi(self) -> float:
        """Step size; defaults to epsilon / 10."""
        if self.step_size is not None:
            return self.step_size
        return self.epsilon * self.step_fraction


class SvmConfig(BaseModel):
    """One-vs-all RBF-SVM rejection head."""

    gamma: float = Field(default=0.01, gt=0.0)
    C: float = Field(default=1.0, gt=0.0)
    tol: float = Field(default=1e-3, gt=0.0)
    reject_rate: float = Field(default=0.10, ge=0.0, lt=1.0)
    validation_fraction: float = Field(default=0.5, gt=0.0, lt=1.0)
    min_calibration: int = Field(default=100, ge=1)


class AutoencoderConfig(BaseModel):
    """Dense autoencoder detector of the two-fold baseline."""

    hidden: List[int] = Field(default_factory=lambda: [64, 16, 64])
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=0.01, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    flag_rate: float = Field(default=0.10, ge=0.0, lt=1.0)
    validation_fraction: float = Field(default=0.5, gt=0.0, lt=1.0)
    min_calibration: int = Field(default=100, ge=1)
    seed: int = 0


class EvalConfig(BaseModel):
    """Security-evaluation protocol."""

    variants: List[str] = Field(default_factory=lambda: list(VARIANTS))
    pnr_grid: List[float] = Field(default_factory=lambda: [-20.0, -15.0, -10.0, -5.0, 0.0])
    snr_db: float = 10.0
    n_frames: int = Field(default=200, ge=1)
    include_greybox: bool = False
    pca_dims: Literal[2, 3] = 2

    @field_validator("variants")
    @classmethod
    def _known_variants(cls, value: List[str]) -> List[str]:
        for name in value:
            if name not in VARIANTS and name != "twofold_greybox":
                raise ValueError(f"Unknown defense variant: {name}")
        return value

    @field_validator("pnr_grid")
    @classmethod
    def _increasing(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("PNR grid must not be empty")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError(f"PNR grid must be strictly increasing: {value}")
        return value


class ExperimentConfig(BaseModel):
    """One reproducible experiment bundle."""

    seed: int
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    cat: CatConfig = Field(default_factory=CatConfig)
    lsgna: LsGnaConfig = Field(default_factory=LsGnaConfig)
    adversarial: AdversarialConfig = Field(default_factory=AdversarialConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    svm: SvmConfig = Field(default_factory=SvmConfig)
    autoencoder: AutoencoderConfig = Field(default_factory=AutoencoderConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output_dir: Optional[Path] = None


class PerturbationBudget(BaseModel):
    """l2 attack radius derived from PNR, SNR and frame power."""

    model_config = ConfigDict(frozen=True)

    pnr_db: float
    snr_db: float
    epsilon: float = Field(ge=0.0)


class RejectDecision(BaseModel):
    """Outcome of classification with rejection; outcome == REJECT when rejected."""

    model_config = ConfigDict(frozen=True)

    outcome: int
    scores: List[float]

    @property
    def rejected(self) -> bool:
        return self.outcome == REJECT


class CurvePoint(BaseModel):
    """Accuracy at one PNR; pnr_db == -inf is the clean point."""

    model_config = ConfigDict(frozen=True)

    pnr_db: float
    accuracy: float = Field(ge=0.0, le=1.0)
    n_samples: int = Field(ge=1)
    n_correct: int = Field(ge=0)


class SecurityCurve(BaseModel):
    """Accuracy-with-rejection as a function of PNR for one defense."""

    variant: str
    snr_db: float
    points: List[CurvePoint]

    @field_validator("points")
    @classmethod
    def _increasing(cls, value: List[CurvePoint]) -> List[CurvePoint]:
        grid = [p.pnr_db for p in value]
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError(f"Curve PNR grid must be strictly increasing: {grid}")
        return value


class EpochLog(BaseModel):
    """One line of the JSON-lines training log."""

    method: str
    epoch: int
    loss: float
    train_accuracy: float
    mean_eps: float = 0.0
    mean_perturbation_power: float = 0.0
