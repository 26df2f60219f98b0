"""Seed derivation and config fingerprinting."""
import hashlib
import zlib

import numpy as np
from pydantic import BaseModel


def derive_seed(root: int, *names: str) -> int:
    """Derive an independent 63-bit seed for a named sub-stream of the root seed."""
    entropy = [int(root) & 0xFFFFFFFF] + [zlib.crc32(name.encode("utf-8")) for name in names]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def frame_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for one frame of a dataset."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(index)]))


def config_hash(config: BaseModel) -> str:
    """Short SHA-256 fingerprint of a config's canonical JSON."""
    payload = config.model_dump_json(exclude={"output_dir"} if "output_dir" in config.model_fields else None)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
