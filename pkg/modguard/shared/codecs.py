"""Low-level helpers shared by the binary artifact formats and CSV exports."""
import csv
import io
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from modguard.shared.errors import MalformedHeaderError, TruncatedPayloadError, VersionMismatchError

PROVENANCE_PREFIX = "# modguard"


class BinaryReader:
    """Little-endian cursor over a byte buffer that reports truncation precisely."""

    def __init__(self, data: bytes, source: str = "<bytes>"):
        self.data = data
        self.offset = 0
        self.source = source

    def _take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise TruncatedPayloadError(
                f"{self.source}: truncated while reading {what} "
                f"(need {size} bytes at offset {self.offset}, file has {len(self.data)})"
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple[Any, ...]:
        fmt = "<" + fmt
        return struct.unpack(fmt, self._take(struct.calcsize(fmt), what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self._take(dt.itemsize * count, what)
        return np.frombuffer(raw, dtype=dt, count=count).astype(dt.newbyteorder("="))

    def string(self, what: str) -> str:
        (length,) = self.unpack("H", f"{what} length")
        raw = self._take(length, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedHeaderError(f"{self.source}: {what} is not valid UTF-8") from e

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise MalformedHeaderError(
                f"{self.source}: {len(self.data) - self.offset} trailing bytes after payload"
            )


def check_magic(reader: BinaryReader, magic: bytes) -> None:
    """Validate a 4-byte magic whose last byte is the format version digit."""
    if len(reader.data) < len(magic):
        raise MalformedHeaderError(f"{reader.source}: file too short for a {magic!r} header")
    found = reader.data[: len(magic)]
    if found[:-1] != magic[:-1]:
        raise MalformedHeaderError(f"{reader.source}: bad magic {found!r}, expected {magic!r}")
    if found != magic:
        raise VersionMismatchError(
            f"{reader.source}: format version {found[-1:]!r} is not supported (expected {magic!r})"
        )
    reader.offset = len(magic)


def pack_string(value: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"String too long for a u16 length prefix: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


def pack_array(values: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(values, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def read_bytes(path: Path) -> BinaryReader:
    path = Path(path)
    return BinaryReader(path.read_bytes(), source=str(path))


def provenance_line(config_hash: Optional[str], seed: Optional[int]) -> str:
    return f"{PROVENANCE_PREFIX} config_hash={config_hash or 'none'} seed={seed if seed is not None else 'none'}"


def format_float(value: float) -> str:
    """Shortest round-tripping text for a float."""
    return repr(float(value))


def write_csv(
    path: Path,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
    config_hash: Optional[str] = None,
    seed: Optional[int] = None,
) -> Path:
    """Write a CSV whose first line is the provenance comment."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.StringIO()
    buffer.write(provenance_line(config_hash, seed) + "\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])
    path.write_text(buffer.getvalue(), encoding="utf-8")
    return path


def read_csv(path: Path) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    """Read a provenance-headed CSV; returns (provenance fields, rows)."""
    provenance: Dict[str, str] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            for token in line.lstrip("#").split()[1:]:
                key, _, value = token.partition("=")
                provenance[key] = value
        else:
            body.append(line)
    rows = list(csv.DictReader(body))
    return provenance, rows
