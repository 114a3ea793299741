"""
StyleBridge configuration.

Run configs are flat `key=value` files (same syntax as a .env file, parsed
line by line with python-dotenv) validated by the StyleConfig model.
Defaults are desk scale; `full_scale=true` switches every unset key to
the full-size hyperparameters instead.
"""

import io
import logging
import os
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from dotenv.parser import parse_stream
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ml.errors import ConfigurationError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"

FULL_SCALE_VALUES = {
    "latent_dim": 32,
    "codebook_size": 1024,
    "gamma": 0.25,
    "kp": 0.01,
    "ki": 0.0001,
    "beta_min": 0.0,
    "kl_target": 3.0,
    "T_refiner": 1000,
    "T_bridge": 1000,
    "steps": 320000,
}


class StyleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: Literal["vaefs", "one_stage", "two_stage"] = "one_stage"
    latent_dim: int = Field(default=32, ge=1)
    codebook_size: int = Field(default=64, ge=1)
    gamma: float = Field(default=0.25, ge=0.0)

    # PI controller
    kp: float = Field(default=0.01, ge=0.0)
    ki: float = Field(default=0.0001, ge=0.0)
    beta_min: float = Field(default=0.0, ge=0.0)
    beta_max: float = Field(default=1.0, ge=0.0)
    kl_target: float = Field(default=3.0, ge=0.0)
    kl_smoothing: float = Field(default=0.99, ge=0.0, lt=1.0)

    T_refiner: int = Field(default=50, ge=1)
    T_bridge: int = Field(default=50, ge=1)
    steps: int = Field(default=20000, ge=0)
    batch: int = Field(default=16, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    seed: int = Field(default=0, ge=0)
    dataset_n: int = Field(default=500, ge=10)
    ramp: int = Field(default=10000, ge=0)
    hidden: int = Field(default=64, ge=1)
    ema_decay: float = Field(default=0.99, ge=0.0, lt=1.0)
    log_every: int = Field(default=500, ge=0)

    # ablation switches
    use_controlvae: bool = True
    use_vq: bool = True
    use_bridge: bool = True
    quantizer_ema: bool = True
    posterior_sampling: bool = False
    full_scale: bool = False

    @model_validator(mode="after")
    def check_beta_range(self) -> "StyleConfig":
        if self.beta_max < self.beta_min:
            raise ValueError(f"beta_max ({self.beta_max}) must be >= beta_min ({self.beta_min})")
        return self

    def to_json(self) -> str:
        return self.model_dump_json()

    @classmethod
    def from_json(cls, text: Union[str, bytes]) -> "StyleConfig":
        try:
            return cls.model_validate_json(text)
        except ValidationError as e:
            raise ConfigurationError(f"Stored config is invalid: {e}")


def full_scale(**overrides) -> StyleConfig:
    """Full-size hyperparameters; remaining keys keep their desk defaults."""
    return StyleConfig(**{**FULL_SCALE_VALUES, "full_scale": True, **overrides})


def _read_bindings(text: str) -> Dict[str, Tuple[str, int]]:
    """key -> (raw value, 1-based line) for every assignment in a config file."""
    values: Dict[str, Tuple[str, int]] = {}
    for binding in parse_stream(io.StringIO(text)):
        # a binding's original text starts with the blank lines before it
        raw = binding.original.string
        line = binding.original.line + raw[: len(raw) - len(raw.lstrip())].count("\n")
        if binding.error or (binding.key is not None and binding.value is None):
            raise ConfigurationError(f"Malformed line '{binding.original.string.strip()}'", line=line)
        if binding.key is None:
            continue  # blank or comment
        if binding.key in values:
            raise ConfigurationError(f"Duplicate key '{binding.key}'", key=binding.key, line=line)
        values[binding.key] = (binding.value.strip(), line)
    return values


def parse_config(text: str) -> StyleConfig:
    bindings = _read_bindings(text)
    raw = {key: value for key, (value, _) in bindings.items()}

    merged: Dict[str, object] = dict(raw)
    if raw.get("full_scale", "false").lower() in ("true", "1", "yes", "on"):
        merged = {**FULL_SCALE_VALUES, **raw}

    try:
        return StyleConfig(**merged)
    except ValidationError as e:
        error = e.errors()[0]
        key = str(error["loc"][0]) if error["loc"] else None
        line = bindings[key][1] if key in bindings else None
        reason = "unknown key" if error["type"] == "extra_forbidden" else error["msg"]
        raise ConfigurationError(f"Invalid value for '{key}': {reason}", key=key, line=line)


def load_config(path: Optional[Union[str, Path]]) -> StyleConfig:
    """
    Parse a key=value config file.

    Args:
        path: Config file, or None for all defaults

    Returns:
        Validated StyleConfig

    Raises:
        ConfigurationError: unreadable file, malformed line, unknown key or
            out-of-range value (with its line number when known)
    """
    if path is None:
        return StyleConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"Cannot read config file {path}: {e}")
    config = parse_config(text)
    logger.debug(f"Loaded config from {path}: {config.model_dump()}")
    return config


def setup_logging(level: Optional[str] = None) -> None:
    load_dotenv()
    level_name = (level or os.getenv("LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=LOG_FORMAT,
        datefmt=LOG_DATEFMT,
    )
