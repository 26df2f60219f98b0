"""Security evaluation: accuracy-vs-PNR curves, clean reports and feature-space projections."""
import asyncio
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from modguard.schemas.models import REJECT, AttackConfig, CurvePoint, SecurityCurve
from modguard.shared.attacks import AttackResult, attack_htrd, attack_twofold, pgd_untargeted
from modguard.shared.codecs import read_csv, write_csv
from modguard.shared.errors import DegenerateTrainingSetError, EmptyDatasetError
from modguard.shared.nn import Model, extract_features, freeze, load_model, predict
from modguard.shared.rejection import (
    Autoencoder,
    SvmModel,
    decide,
    load_autoencoder,
    load_svm,
    reconstruction_mse,
    svm_scores,
)
from modguard.shared.seeding import derive_seed
from modguard.shared.signal import Dataset, epsilons_from_pnr, require_frames

logger = logging.getLogger(__name__)

PLAIN_VARIANTS = ("undefended", "cat_dnn", "lsgna_dnn")
SVM_VARIANTS = ("htrd", "lsgna_nr")
AE_VARIANTS = ("twofold", "twofold_greybox")
CLEAN = -math.inf


@dataclass(frozen=True)
class DefenseUnderTest:
    """A classifier plus the run-time detector its variant calls for."""

    variant: str
    model: Model
    svm: Optional[SvmModel] = None
    autoencoder: Optional[Autoencoder] = None

    def __post_init__(self):
        if self.variant in PLAIN_VARIANTS:
            expected = (False, False)
        elif self.variant in SVM_VARIANTS:
            expected = (True, False)
        elif self.variant in AE_VARIANTS:
            expected = (False, True)
        else:
            raise ValueError(f"Unknown defense variant: {self.variant}")
        if (self.svm is not None, self.autoencoder is not None) != expected:
            raise ValueError(
                f"Variant {self.variant} needs svm={expected[0]}, autoencoder={expected[1]}"
            )


class FrameOutcome(NamedTuple):
    index: int
    label: int
    epsilon: float
    result: AttackResult
    decision: int


def decide_frames(dut: DefenseUnderTest, samples: np.ndarray) -> np.ndarray:
    """Deployed decision per frame: a class id or REJECT."""
    if dut.svm is not None:
        return decide(dut.svm, svm_scores(dut.svm, extract_features(dut.model, samples)))
    outcomes = predict(dut.model, samples).astype(np.int64)
    if dut.autoencoder is not None:
        flagged = reconstruction_mse(dut.autoencoder, samples) > dut.autoencoder.threshold
        outcomes[flagged] = REJECT
    return outcomes


def attack_frame(dut: DefenseUnderTest, x: np.ndarray, y: int, cfg: AttackConfig) -> AttackResult:
    """White-box attack matched to the variant's decision rule."""
    if dut.variant in SVM_VARIANTS:
        return attack_htrd(dut.model, dut.svm, x, y, cfg)
    if dut.variant in AE_VARIANTS:
        return attack_twofold(
            dut.model, dut.autoencoder, x, y, cfg, grey_box=dut.variant == "twofold_greybox"
        )
    return pgd_untargeted(dut.model, x, y, cfg)


def _frame_config(cfg: AttackConfig, x: np.ndarray, epsilon: float) -> AttackConfig:
    # keyed by frame content so results do not depend on frame order
    key = str(zlib.crc32(np.ascontiguousarray(x).tobytes()))
    return cfg.model_copy(update={"epsilon": float(epsilon), "seed": derive_seed(cfg.seed, "attack", key)})


async def attack_frames(
    dut: DefenseUnderTest,
    testset: Dataset,
    epsilons: np.ndarray,
    cfg: AttackConfig,
    threads: int = 1,
) -> List[FrameOutcome]:
    """Attack every frame at its own radius; results come back in input order."""
    require_frames(testset, "test set")

    def run_one(i: int) -> FrameOutcome:
        x = testset.samples[i]
        y = int(testset.labels[i])
        result = attack_frame(dut, x, y, _frame_config(cfg, x, epsilons[i]))
        decision = int(decide_frames(dut, result.x_adv[None])[0])
        return FrameOutcome(index=i, label=y, epsilon=float(epsilons[i]), result=result, decision=decision)

    outcomes: List[FrameOutcome] = []
    batch = max(1, threads)
    for start in range(0, len(testset), batch):
        tasks = [asyncio.to_thread(run_one, i) for i in range(start, min(start + batch, len(testset)))]
        outcomes.extend(await asyncio.gather(*tasks))
    return outcomes


async def evaluate_point_async(
    dut: DefenseUnderTest,
    testset: Dataset,
    pnr_db: float,
    snr_db: float,
    attack_cfg: AttackConfig,
    threads: int = 1,
) -> CurvePoint:
    """
    Accuracy of a defense at one PNR.

    Clean (pnr_db = -inf): fraction classified correctly and not rejected.
    Attacked: fraction of attacked frames rejected or classified correctly.
    """
    require_frames(testset, "test set")
    n = len(testset)
    if pnr_db == CLEAN:
        correct = int(np.sum(decide_frames(dut, testset.samples) == testset.labels))
    else:
        snrs = np.full(n, snr_db)
        epsilons = epsilons_from_pnr(testset.samples, pnr_db, snrs)
        outcomes = await attack_frames(dut, testset, epsilons, attack_cfg, threads)
        correct = sum(1 for o in outcomes if o.decision in (o.label, REJECT))
    point = CurvePoint(pnr_db=pnr_db, accuracy=correct / n, n_samples=n, n_correct=correct)
    logger.info(f"{dut.variant} @ PNR {pnr_db} dB: accuracy {point.accuracy:.3f} ({correct}/{n})")
    return point


def evaluate_point(
    dut: DefenseUnderTest,
    testset: Dataset,
    pnr_db: float,
    snr_db: float,
    attack_cfg: AttackConfig,
    threads: int = 1,
) -> CurvePoint:
    return asyncio.run(evaluate_point_async(dut, testset, pnr_db, snr_db, attack_cfg, threads))


async def security_curve_async(
    dut: DefenseUnderTest,
    testset: Dataset,
    pnr_grid: Sequence[float],
    snr_db: float,
    cfg: AttackConfig,
    threads: int = 1,
) -> SecurityCurve:
    if any(b <= a for a, b in zip(pnr_grid, pnr_grid[1:])):
        raise ValueError(f"PNR grid must be strictly increasing: {list(pnr_grid)}")
    points = []
    for pnr_db in pnr_grid:
        points.append(await evaluate_point_async(dut, testset, pnr_db, snr_db, cfg, threads))
    return SecurityCurve(variant=dut.variant, snr_db=snr_db, points=points)


def security_curve(
    dut: DefenseUnderTest,
    testset: Dataset,
    pnr_grid: Sequence[float],
    snr_db: float,
    cfg: AttackConfig,
    threads: int = 1,
) -> SecurityCurve:
    return asyncio.run(security_curve_async(dut, testset, pnr_grid, snr_db, cfg, threads))


class PcaProjection(NamedTuple):
    coords: np.ndarray  # (N, dims)
    explained: np.ndarray  # (dims,) variance fractions, non-increasing
    components: np.ndarray  # (F, dims) unit principal axes
    mean: np.ndarray  # (F,)


def pca_project(features: np.ndarray, dims: int = 2) -> PcaProjection:
    """Mean-centered projection onto the top principal axes of the covariance."""
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or len(z) <= dims:
        raise ValueError(f"PCA to {dims} dims needs more than {dims} samples, got shape {z.shape}")
    mean = z.mean(axis=0)
    centered = z - mean
    cov = centered.T @ centered / (len(z) - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]

    k = min(dims, z.shape[1])
    components = np.zeros((z.shape[1], dims))
    components[:, :k] = eigvecs[:, :k]
    # sign convention: largest-magnitude loading of each axis is positive
    for j in range(k):
        pivot = np.argmax(np.abs(components[:, j]))
        if components[pivot, j] < 0:
            components[:, j] *= -1

    total = eigvals.sum()
    explained = np.zeros(dims)
    if total > 0:
        explained[:k] = eigvals[:k] / total
    return PcaProjection(coords=centered @ components, explained=explained, components=components, mean=mean)


def separation_score(features: np.ndarray, labels: np.ndarray) -> float:
    """
    Mean pairwise inter-class centroid distance over mean intra-class standard deviation.

    A class's standard deviation is the per-feature (population) deviation
    averaged over feature dimensions.
    """
    z = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise DegenerateTrainingSetError("Separation needs at least two classes")
    centroids = np.stack([z[y == c].mean(axis=0) for c in classes])
    spreads = [float(np.mean(z[y == c].std(axis=0))) for c in classes]
    iu = np.triu_indices(len(classes), k=1)
    pairwise = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=2)[iu]
    inter = float(np.mean(pairwise))
    intra = float(np.mean(spreads))
    if inter == 0.0:
        return 0.0
    return inter / intra if intra > 0 else math.inf


def clean_report(duts: Dict[str, DefenseUnderTest], testset: Dataset) -> Dict[str, float]:
    """Clean accuracy-with-rejection of every defense on the same frames."""
    require_frames(testset, "test set")
    report = {}
    for variant, dut in duts.items():
        correct = int(np.sum(decide_frames(dut, testset.samples) == testset.labels))
        report[variant] = correct / len(testset)
    return report


class SnrAccuracy(NamedTuple):
    snr_db: float
    n: int
    accuracy: float


def accuracy_by_snr(model: Model, d: Dataset) -> List[SnrAccuracy]:
    """Clean test accuracy at each SNR level of the dataset."""
    test = d.test
    if len(test) == 0:
        raise EmptyDatasetError("Dataset has no test frames")
    predictions = predict(model, test.samples)
    rows = []
    for snr in np.unique(test.snr_db):
        mask = test.snr_db == snr
        rows.append(SnrAccuracy(float(snr), int(mask.sum()), float(np.mean(predictions[mask] == test.labels[mask]))))
    return rows


CURVE_HEADER = ("variant", "pnr_db", "snr_db", "n", "accuracy")


def write_curves_csv(
    curves: Sequence[SecurityCurve],
    path: Path,
    config_hash: Optional[str] = None,
    seed: Optional[int] = None,
) -> Path:
    rows = [
        (curve.variant, float(p.pnr_db), float(curve.snr_db), p.n_samples, float(p.accuracy))
        for curve in curves
        for p in curve.points
    ]
    return write_csv(path, CURVE_HEADER, rows, config_hash, seed)


def read_curves_csv(path: Path) -> List[SecurityCurve]:
    _, rows = read_csv(path)
    grouped: Dict[str, List[dict]] = {}
    for row in rows:
        grouped.setdefault(row["variant"], []).append(row)
    curves = []
    for variant, entries in grouped.items():
        points = []
        for row in entries:
            n = int(row["n"])
            accuracy = float(row["accuracy"])
            points.append(
                CurvePoint(pnr_db=float(row["pnr_db"]), accuracy=accuracy, n_samples=n, n_correct=round(accuracy * n))
            )
        curves.append(SecurityCurve(variant=variant, snr_db=float(entries[0]["snr_db"]), points=points))
    return curves


def write_projection_csv(
    projection: PcaProjection,
    labels: np.ndarray,
    path: Path,
    config_hash: Optional[str] = None,
    seed: Optional[int] = None,
) -> Path:
    dims = projection.coords.shape[1]
    header = ("label",) + tuple(f"pc{i + 1}" for i in range(dims))
    rows = [(int(y), *(float(v) for v in row)) for y, row in zip(labels, projection.coords)]
    return write_csv(path, header, rows, config_hash, seed)


def read_projection_csv(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (labels, coords)."""
    _, rows = read_csv(path)
    if not rows:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 0))
    dims = len(rows[0]) - 1
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    coords = np.array([[float(r[f"pc{i + 1}"]) for i in range(dims)] for r in rows])
    return labels, coords


def balanced_subset(d: Dataset, limit: int) -> Dataset:
    """Up to `limit` frames taken round-robin across classes, in stored order within a class."""
    if limit >= len(d):
        return d
    rank = np.zeros(len(d), dtype=np.int64)
    for k in np.unique(d.labels):
        members = np.flatnonzero(d.labels == k)
        rank[members] = np.arange(len(members))
    order = np.lexsort((d.labels, rank))
    return d.subset(np.sort(order[:limit]))


def evaluation_frames(d: Dataset, snr_db: float, n_frames: int) -> Dataset:
    """Class-balanced test frames at one SNR."""
    frames = d.test.select(snr_db=snr_db)
    if len(frames) == 0:
        raise EmptyDatasetError(f"No test frames at SNR {snr_db} dB")
    return balanced_subset(frames, n_frames)


def load_defense(
    variant: str,
    model_path: Path,
    svm_path: Optional[Path] = None,
    ae_path: Optional[Path] = None,
) -> DefenseUnderTest:
    """Load and freeze the components a variant needs."""
    svm = load_svm(svm_path) if variant in SVM_VARIANTS and svm_path is not None else None
    autoencoder = load_autoencoder(ae_path) if variant in AE_VARIANTS and ae_path is not None else None
    if autoencoder is not None:
        freeze(autoencoder.model)
    return DefenseUnderTest(variant, freeze(load_model(model_path)), svm=svm, autoencoder=autoencoder)
