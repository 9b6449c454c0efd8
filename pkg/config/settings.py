from typing import Dict, Iterable, Optional

from dotenv import dotenv_values
from loguru import logger
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from models.errors import ConfigError
from models.schemas import RunConfig


class Settings(BaseSettings):
    """Process-level settings read from the environment (prefix ``SPATIAL_HMM_``)."""

    model_config = SettingsConfigDict(env_prefix="SPATIAL_HMM_", env_file=".env", extra="ignore")

    # Logging
    log_level: str = "INFO"
    log_file: Optional[str] = None

    # Output
    output_dir: str = "output"
    float_format: str = "%.17g"

    # Parallelism for chains, draws and replications
    max_workers: int = 4

    # Sampler progress reporting interval (iterations)
    progress_every: int = 500


settings = Settings()


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    """Turn ``key=value`` command line overrides into a dict."""
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"Override '{pair}' is not of the form key=value", code="BAD_OVERRIDE")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """
    Load a flat key=value run configuration file and apply overrides.

    Args:
        path: Configuration file; ``None`` uses defaults only
        overrides: Values that take precedence over the file

    Returns:
        Validated run configuration

    Raises:
        ConfigError: Unknown keys or invalid values
    """
    values: Dict[str, Optional[str]] = {}
    if path is not None:
        try:
            values.update(dotenv_values(path))
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}", code="CONFIG_UNREADABLE")
        logger.info(f"Loaded run config from {path} ({len(values)} keys)")
    values.update(overrides or {})
    values.setdefault("output_dir", settings.output_dir)

    unknown = sorted(set(values) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(unknown)}", code="UNKNOWN_KEY")

    cleaned = {key: value for key, value in values.items() if value not in (None, "")}
    try:
        return RunConfig.model_validate(cleaned)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"Invalid config value for '{location}': {first['msg']}", code="INVALID_VALUE")
