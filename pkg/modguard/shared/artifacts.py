"""Run-directory bookkeeping: JSON artifacts and the manifest."""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def write_json(path: Path, payload: Dict[str, Any], config_hash: Optional[str], seed: Optional[int]) -> Path:
    """JSON artifact carrying its provenance fields."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"config_hash": config_hash, "seed": seed, **payload}
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(
    out_dir: Path,
    artifacts: Iterable[Path],
    config_hash: Optional[str],
    seed: Optional[int],
) -> Path:
    """List every artifact under out_dir with its size and digest."""
    out_dir = Path(out_dir)
    entries = []
    for path in sorted({Path(p) for p in artifacts}):
        if not path.exists():
            logger.warning(f"Manifest entry {path} does not exist")
            continue
        entries.append(
            {
                "path": str(path.relative_to(out_dir)) if path.is_relative_to(out_dir) else str(path),
                "bytes": path.stat().st_size,
                "sha256": file_digest(path),
            }
        )
    return write_json(out_dir / MANIFEST_NAME, {"artifacts": entries}, config_hash, seed)


def missing_artifacts(paths: Iterable[Any]) -> List[str]:
    return [str(p) for p in paths if not Path(p).exists()]
