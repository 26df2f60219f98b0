"""Configuration settings for modguard."""
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic_settings import BaseSettings, SettingsConfigDict

from modguard.schemas.models import ExperimentConfig
from modguard.shared.seeding import derive_seed

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process settings read from the environment (prefix MODGUARD_) and .env."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="MODGUARD_",
        case_sensitive=False,
        extra="ignore",
    )

    # Artifacts
    output_dir: Path = Path("runs")

    # Worker Configuration
    command: str = "repro"  # fallback subcommand when argv names none
    threads: int = 4
    log_level: str = "info"


settings = Settings()


def _coerce(value: str) -> Any:
    """Interpret a --set override value the way TOML would."""
    try:
        return tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        return value


def apply_overrides(raw: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply dotted `section.field=value` overrides to a raw config mapping."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"Override must look like section.field=value, got {item!r}")
        dotted, value = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = raw
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = _coerce(value.strip())
    return raw


def load_experiment_config(
    path: Optional[Path] = None,
    overrides: Optional[List[str]] = None,
    **fields: Any,
) -> ExperimentConfig:
    """
    Load an ExperimentConfig from a TOML file, then apply overrides.

    Keyword fields are top-level or dotted-path values set by named CLI flags;
    None values are ignored so unset flags never clobber the file.
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
        logger.debug(f"Loaded experiment config from {path}")

    raw = apply_overrides(raw, overrides or [])
    for dotted, value in fields.items():
        if value is None:
            continue
        keys = dotted.split("__")
        node = raw
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value

    return ExperimentConfig.model_validate(raw)


def with_derived_seeds(config: ExperimentConfig) -> ExperimentConfig:
    """Replace every section seed by a named sub-stream of the root seed."""
    streams = {"dataset": "data", "train": "train", "attack": "attack", "autoencoder": "autoencoder"}
    update = {
        section: getattr(config, section).model_copy(update={"seed": derive_seed(config.seed, stream)})
        for section, stream in streams.items()
    }
    return config.model_copy(update=update)
