"""Synthetic IQ modulation frames, datasets, and PNR-derived attack budgets."""
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import signal as sps

from modguard.schemas.models import MODULATIONS, DatasetConfig, ModulationClass, PerturbationBudget
from modguard.shared.codecs import (
    BinaryReader,
    check_magic,
    pack_string,
    read_bytes,
    write_csv,
)
from modguard.shared.errors import (
    EmptyDatasetError,
    MalformedHeaderError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedModulationError,
)
from modguard.shared.seeding import derive_seed, frame_rng

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"MGD1"
SPLIT_TRAIN = 0
SPLIT_TEST = 1
ADVERSARIAL_FLAG = 0x80
SNR_ROUNDING_TOL = 1e-9

LINEAR_CONSTELLATIONS = {"BPSK", "QPSK", "8PSK", "QAM16", "QAM64", "PAM4"}
FSK_MODULATION_INDEX = 0.5
GFSK_BT = 0.35
RRC_SPAN_SYMBOLS = 10


@dataclass(frozen=True)
class IQFrame:
    """One 2xN frame: row 0 in-phase, row 1 quadrature."""

    samples: np.ndarray
    label: ModulationClass
    snr_db: float

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] != 2:
            raise ShapeMismatchError(f"IQ frame must be 2xN, got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("IQ frame samples must be finite")

    @property
    def n(self) -> int:
        return self.samples.shape[1]

    def as_complex(self) -> np.ndarray:
        return self.samples[0].astype(np.float64) + 1j * self.samples[1].astype(np.float64)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-wise frame store; split 0 = train, 1 = test."""

    classes: Tuple[ModulationClass, ...]
    samples: np.ndarray  # (M, 2, N) float32
    labels: np.ndarray  # (M,) int64
    snr_db: np.ndarray  # (M,) float64
    split: np.ndarray  # (M,) uint8
    adversarial: np.ndarray = field(default=None)  # (M,) bool

    def __post_init__(self):
        m = len(self.labels)
        if self.adversarial is None:
            object.__setattr__(self, "adversarial", np.zeros(m, dtype=bool))
        if self.samples.ndim != 3 or self.samples.shape[1] != 2:
            raise ShapeMismatchError(f"Dataset samples must be (M, 2, N), got {self.samples.shape}")
        for name in ("samples", "snr_db", "split", "adversarial"):
            if len(getattr(self, name)) != m:
                raise ShapeMismatchError(f"Dataset column {name} has length != {m}")
        if m and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise ValueError("Dataset labels out of range of its class table")

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.classes == other.classes
            and self.samples.shape == other.samples.shape
            and np.array_equal(self.samples, other.samples)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.snr_db, other.snr_db)
            and np.array_equal(self.split, other.split)
            and np.array_equal(self.adversarial, other.adversarial)
        )

    @property
    def n(self) -> int:
        return self.samples.shape[2]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def frame(self, index: int) -> IQFrame:
        return IQFrame(
            samples=self.samples[index],
            label=self.classes[int(self.labels[index])],
            snr_db=float(self.snr_db[index]),
        )

    @property
    def frames(self) -> Iterator[IQFrame]:
        return (self.frame(i) for i in range(len(self)))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            classes=self.classes,
            samples=self.samples[idx],
            labels=self.labels[idx],
            snr_db=self.snr_db[idx],
            split=self.split[idx],
            adversarial=self.adversarial[idx],
        )

    def select(
        self,
        split: Optional[str] = None,
        snr_db: Optional[float] = None,
        limit: Optional[int] = None,
    ) -> "Dataset":
        """Frames of one split and/or SNR, in stored order, optionally truncated."""
        mask = np.ones(len(self), dtype=bool)
        if split is not None:
            code = {"train": SPLIT_TRAIN, "test": SPLIT_TEST}[split]
            mask &= self.split == code
        if snr_db is not None:
            mask &= np.isclose(self.snr_db, snr_db)
        indices = np.flatnonzero(mask)
        if limit is not None:
            indices = indices[:limit]
        return self.subset(indices)

    @property
    def train(self) -> "Dataset":
        return self.select(split="train")

    @property
    def test(self) -> "Dataset":
        return self.select(split="test")


def _modulation(mod: Union[ModulationClass, str]) -> str:
    name = mod.name if isinstance(mod, ModulationClass) else str(mod)
    if name not in MODULATIONS:
        raise UnsupportedModulationError(f"Unsupported modulation: {name}")
    return name


def rrc_taps(rolloff: float, sps_: int, span: int = RRC_SPAN_SYMBOLS) -> np.ndarray:
    """Unit-energy root-raised-cosine taps spanning `span` symbols."""
    t = np.arange(-span * sps_ // 2, span * sps_ // 2 + 1) / sps_
    taps = np.empty_like(t)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            taps[i] = 1.0 - rolloff + 4.0 * rolloff / np.pi
        elif abs(abs(ti) - 1.0 / (4.0 * rolloff)) < 1e-12:
            taps[i] = (rolloff / np.sqrt(2.0)) * (
                (1.0 + 2.0 / np.pi) * np.sin(np.pi / (4.0 * rolloff))
                + (1.0 - 2.0 / np.pi) * np.cos(np.pi / (4.0 * rolloff))
            )
        else:
            taps[i] = (
                np.sin(np.pi * ti * (1.0 - rolloff))
                + 4.0 * rolloff * ti * np.cos(np.pi * ti * (1.0 + rolloff))
            ) / (np.pi * ti * (1.0 - (4.0 * rolloff * ti) ** 2))
    return taps / np.sqrt(np.sum(taps**2))


def _constellation(name: str) -> np.ndarray:
    if name == "BPSK":
        return np.array([1.0, -1.0], dtype=np.complex128)
    if name == "QPSK":
        return np.exp(1j * (np.pi / 4 + np.pi / 2 * np.arange(4)))
    if name == "8PSK":
        return np.exp(1j * 2 * np.pi * np.arange(8) / 8)
    if name == "PAM4":
        return np.array([-3.0, -1.0, 1.0, 3.0], dtype=np.complex128)
    side = {"QAM16": 4, "QAM64": 8}[name]
    levels = np.arange(-(side - 1), side, 2, dtype=np.float64)
    return (levels[:, None] + 1j * levels[None, :]).ravel()


def _linear(name: str, n: int, rng: np.random.Generator, sps_: int, rolloff: float) -> np.ndarray:
    taps = rrc_taps(rolloff, sps_)
    points = _constellation(name)
    n_symbols = int(math.ceil(n / sps_)) + 2 * RRC_SPAN_SYMBOLS
    symbols = points[rng.integers(0, len(points), size=n_symbols)]
    shaped = sps.upfirdn(taps, symbols, up=sps_)
    start = (len(taps) - 1) // 2 + RRC_SPAN_SYMBOLS * sps_
    return shaped[start : start + n]


def _frequency_pulse(name: str, sps_: int) -> np.ndarray:
    if name == "CPFSK":
        return np.ones(sps_) / sps_
    # Gaussian frequency pulse, bandwidth-time product GFSK_BT, 4 symbols long
    t = np.arange(-2 * sps_, 2 * sps_ + 1) / sps_
    sigma = np.sqrt(np.log(2.0)) / (2.0 * np.pi * GFSK_BT)
    gauss = np.exp(-(t**2) / (2.0 * sigma**2))
    pulse = np.convolve(gauss, np.ones(sps_))
    return pulse / np.sum(pulse)


def _fsk(name: str, n: int, rng: np.random.Generator, sps_: int) -> np.ndarray:
    pad = 4 * sps_
    n_symbols = int(math.ceil((n + 2 * pad) / sps_)) + 1
    symbols = rng.choice([-1.0, 1.0], size=n_symbols)
    freq = sps.upfirdn(_frequency_pulse(name, sps_), symbols, up=sps_)
    phase0 = rng.uniform(0.0, 2.0 * np.pi)
    # each symbol advances the phase by pi * h * a_k
    phase = phase0 + np.pi * FSK_MODULATION_INDEX * np.cumsum(freq)
    return np.exp(1j * phase[pad : pad + n])


def _message(n: int, rng: np.random.Generator) -> np.ndarray:
    """Band-limited random source: low-passed noise plus a random tone, unit peak."""
    pad = 64
    lowpass = sps.firwin(65, 0.05)
    noise = sps.lfilter(lowpass, 1.0, rng.standard_normal(n + 2 * pad))[pad : pad + n]
    freq = rng.uniform(0.005, 0.03)
    tone = np.cos(2.0 * np.pi * freq * np.arange(n) + rng.uniform(0.0, 2.0 * np.pi))
    message = tone + noise / (np.std(noise) + 1e-12)
    return message / np.max(np.abs(message))


def _analog(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    message = _message(n, rng)
    if name == "WBFM":
        deviation = 0.1  # cycles per sample at unit message amplitude
        return np.exp(1j * 2.0 * np.pi * deviation * np.cumsum(message))
    if name == "AM-DSB":
        return (1.0 + 0.5 * message).astype(np.complex128)
    return sps.hilbert(message)


def synth_components(
    mod: Union[ModulationClass, str],
    snr_db: float,
    n: int = 128,
    seed: Union[int, np.random.Generator] = 0,
    samples_per_symbol: int = 8,
    rolloff: float = 0.35,
    frame_energy: float = 0.01,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generate the clean and noise components of one frame as 2xN float64 arrays.

    The clean baseband has unit mean power before scaling; complex white Gaussian
    noise has power 10^(-snr_db/10). Both are then scaled by one common gain so
    that the noisy frame has squared l2 norm `frame_energy`.
    """
    name = _modulation(mod)
    if n < 16:
        raise ValueError(f"Frame length must be >= 16, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    if name in LINEAR_CONSTELLATIONS:
        clean = _linear(name, n, rng, samples_per_symbol, rolloff)
    elif name in ("CPFSK", "GFSK"):
        clean = _fsk(name, n, rng, samples_per_symbol)
    else:
        clean = _analog(name, n, rng)
    clean = clean / np.sqrt(np.mean(np.abs(clean) ** 2))

    if math.isinf(snr_db) and snr_db > 0:
        noise = np.zeros(n, dtype=np.complex128)
    else:
        noise_power = 10.0 ** (-snr_db / 10.0)
        noise = np.sqrt(noise_power / 2.0) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))

    gain = np.sqrt(frame_energy / np.sum(np.abs(clean + noise) ** 2))
    clean, noise = gain * clean, gain * noise
    return (
        np.stack([clean.real, clean.imag]),
        np.stack([noise.real, noise.imag]),
    )


def synth_frame(
    mod: Union[ModulationClass, str],
    snr_db: float,
    n: int = 128,
    seed: Union[int, np.random.Generator] = 0,
    samples_per_symbol: int = 8,
    rolloff: float = 0.35,
    frame_energy: float = 0.01,
) -> IQFrame:
    """Generate one labeled noisy frame; deterministic given seed."""
    label = mod if isinstance(mod, ModulationClass) else ModulationClass(
        id=MODULATIONS.index(_modulation(mod)), name=_modulation(mod)
    )
    clean, noise = synth_components(
        label, snr_db, n, seed, samples_per_symbol, rolloff, frame_energy
    )
    return IQFrame(samples=(clean + noise).astype(np.float32), label=label, snr_db=float(snr_db))


def gen_dataset(config: DatasetConfig) -> Dataset:
    """Generate |classes| x |snr_grid| x frames_per_cell frames with a per-cell split."""
    classes = config.modulation_classes()
    n_frames = len(classes) * len(config.snr_grid) * config.frames_per_cell
    logger.info(
        f"Generating {n_frames} frames: {len(classes)} classes, "
        f"{len(config.snr_grid)} SNR levels, {config.frames_per_cell} per cell"
    )

    samples = np.empty((n_frames, 2, config.n), dtype=np.float32)
    labels = np.empty(n_frames, dtype=np.int64)
    snrs = np.empty(n_frames, dtype=np.float64)
    split = np.empty(n_frames, dtype=np.uint8)

    n_train = min(max(int(round(config.frames_per_cell * config.split_ratio)), 1), config.frames_per_cell - 1)
    split_rng = np.random.default_rng(derive_seed(config.seed, "split"))

    index = 0
    for mod in classes:
        for snr_db in config.snr_grid:
            cell_split = np.full(config.frames_per_cell, SPLIT_TEST, dtype=np.uint8)
            cell_split[split_rng.permutation(config.frames_per_cell)[:n_train]] = SPLIT_TRAIN
            for j in range(config.frames_per_cell):
                frame = synth_frame(
                    mod,
                    snr_db,
                    config.n,
                    frame_rng(config.seed, index),
                    config.samples_per_symbol,
                    config.rolloff,
                    config.frame_energy,
                )
                samples[index] = frame.samples
                labels[index] = mod.id
                snrs[index] = snr_db
                split[index] = cell_split[j]
                index += 1

    return Dataset(
        classes=tuple(classes),
        samples=samples,
        labels=labels,
        snr_db=snrs,
        split=split,
    )


def signal_power(x: Union[IQFrame, np.ndarray]) -> float:
    """Squared l2 norm over all 2N entries."""
    samples = x.samples if isinstance(x, IQFrame) else np.asarray(x)
    values = samples.astype(np.float64).ravel()
    return float(np.dot(values, values))


def signal_powers(samples: np.ndarray) -> np.ndarray:
    """Per-frame squared l2 norms of an (M, 2, N) block."""
    flat = samples.reshape(len(samples), -1).astype(np.float64)
    return np.einsum("ij,ij->i", flat, flat)


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def epsilon_from_pnr(x: Union[IQFrame, np.ndarray], pnr_db: float, snr_db: float) -> PerturbationBudget:
    """l2 radius sqrt(PNR * ||x||^2 / (SNR + 1)) with linear-scale PNR and SNR."""
    pnr_lin = db_to_linear(pnr_db)
    snr_lin = db_to_linear(snr_db)
    epsilon = 0.0 if pnr_lin == 0.0 else math.sqrt(pnr_lin * signal_power(x) / (snr_lin + 1.0))
    return PerturbationBudget(pnr_db=pnr_db, snr_db=snr_db, epsilon=epsilon)


def epsilons_from_pnr(samples: np.ndarray, pnr_db: float, snr_db: np.ndarray) -> np.ndarray:
    """Vectorized per-frame budgets for an (M, 2, N) block and per-frame SNR tags."""
    pnr_lin = db_to_linear(pnr_db)
    if pnr_lin == 0.0:
        return np.zeros(len(samples))
    snr_lin = 10.0 ** (np.asarray(snr_db, dtype=np.float64) / 10.0)
    return np.sqrt(pnr_lin * signal_powers(samples) / (snr_lin + 1.0))


def _record_dtype(n: int) -> np.dtype:
    """Packed little-endian MGD1 record: label u16, centi-dB SNR i16, split u8, 2N float32."""
    return np.dtype([("label", "<u2"), ("snr", "<i2"), ("split", "u1"), ("samples", "<f4", (2 * n,))])


def save_dataset(d: Dataset, path: Path) -> Path:
    """Write the MGD1 binary format."""
    path = Path(path)
    if not np.all(np.isfinite(d.snr_db)):
        raise ValueError("Only finite SNR tags can be stored in MGD1")
    centi = np.round(d.snr_db * 100.0)
    if np.any(np.abs(centi) > 32767):
        raise ValueError("SNR tags beyond +-327.67 dB do not fit MGD1")
    rounded = np.abs(centi / 100.0 - d.snr_db) > SNR_ROUNDING_TOL
    if np.any(rounded):
        logger.warning(
            f"{int(np.sum(rounded))} SNR tags are not multiples of 0.01 dB and are stored rounded "
            f"(e.g. {float(d.snr_db[rounded][0])!r} -> {float(centi[rounded][0]) / 100.0!r})"
        )

    header = bytearray(DATASET_MAGIC)
    header += struct.pack(
        "<IIII", d.num_classes, len(np.unique(d.snr_db)), len(d), d.n
    )
    for mod in d.classes:
        header += pack_string(mod.name)

    records = np.zeros(len(d), dtype=_record_dtype(d.n))
    records["label"] = d.labels
    records["snr"] = centi.astype(np.int16)
    records["split"] = d.split | np.where(d.adversarial, ADVERSARIAL_FLAG, 0).astype(np.uint8)
    records["samples"] = d.samples.reshape(len(d), -1)

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(header) + records.tobytes())
    logger.debug(f"Saved {len(d)} frames to {path}")
    return path


def load_dataset(path: Path) -> Dataset:
    """Read an MGD1 file; raises MalformedHeaderError, TruncatedPayloadError or VersionMismatchError."""
    reader = read_bytes(path)
    return _decode_dataset(reader)


def _decode_dataset(reader: BinaryReader) -> Dataset:
    check_magic(reader, DATASET_MAGIC)
    try:
        k, n_snr, n_frames, n = reader.unpack("IIII", "header fields")
        if k == 0 or n == 0:
            raise MalformedHeaderError(f"{reader.source}: header declares K={k}, N={n}")
        names = [reader.string(f"class name {i}") for i in range(k)]
    except TruncatedPayloadError as e:
        raise MalformedHeaderError(str(e)) from e
    try:
        classes = tuple(ModulationClass(id=i, name=name) for i, name in enumerate(names))
    except ValueError as e:
        raise MalformedHeaderError(f"{reader.source}: bad class table: {e}") from e

    record = _record_dtype(n)
    remaining = len(reader.data) - reader.offset
    if remaining < n_frames * record.itemsize:
        complete = remaining // record.itemsize
        raise TruncatedPayloadError(
            f"{reader.source}: header declares {n_frames} frames, payload holds {complete} complete records"
        )
    records = np.frombuffer(reader.data, dtype=record, count=n_frames, offset=reader.offset)
    reader.offset += n_frames * record.itemsize
    reader.expect_end()

    labels = records["label"].astype(np.int64)
    if n_frames and labels.max() >= k:
        raise MalformedHeaderError(f"{reader.source}: record label {labels.max()} >= K={k}")
    snrs = records["snr"].astype(np.float64) / 100.0
    flags = records["split"]
    split = (flags & 0x01).astype(np.uint8)
    adversarial = (flags & ADVERSARIAL_FLAG).astype(bool)
    samples = records["samples"].astype(np.float32).reshape(n_frames, 2, n)

    if n_frames and len(np.unique(snrs)) != n_snr:
        raise MalformedHeaderError(
            f"{reader.source}: header declares {n_snr} SNR levels, records carry {len(np.unique(snrs))}"
        )
    return Dataset(
        classes=classes,
        samples=samples,
        labels=labels,
        snr_db=snrs,
        split=split,
        adversarial=adversarial,
    )


def dataset_file_size(class_names: Sequence[str], n_frames: int, n: int) -> int:
    """Exact MGD1 size: header + per-frame records of 5 + 8N bytes."""
    table = sum(2 + len(name.encode("utf-8")) for name in class_names)
    return 4 + 16 + table + n_frames * (5 + 2 * n * 4)


def export_metadata_csv(
    d: Dataset,
    path: Path,
    config_hash: Optional[str] = None,
    seed: Optional[int] = None,
) -> Path:
    """One inspection row per frame."""
    powers = signal_powers(d.samples)
    rows: List[list] = []
    for i in range(len(d)):
        rows.append(
            [
                i,
                int(d.labels[i]),
                d.classes[int(d.labels[i])].name,
                float(d.snr_db[i]),
                "train" if d.split[i] == SPLIT_TRAIN else "test",
                int(d.adversarial[i]),
                float(powers[i]),
            ]
        )
    return write_csv(
        path,
        ["index", "label", "name", "snr_db", "split", "adversarial", "power"],
        rows,
        config_hash=config_hash,
        seed=seed,
    )


def require_frames(d: Dataset, what: str = "dataset") -> Dataset:
    if len(d) == 0:
        raise EmptyDatasetError(f"{what} has no frames")
    return d
