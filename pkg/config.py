import configparser
import json
import os
import typing
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from augment import AugmentPolicy
from dsp import FrontendConfig
from errors import ConfigError
from evaluation import SweepSpec
from manifest import SCHEMES
from nn import ModelSpec
from train import TrainConfig
from uncertainty import UncertaintyConfig

# Load .env file if it exists
load_dotenv()

# Base directory for resolving relative paths
_BASE_DIR = Path(__file__).parent


# Application configuration
class Config:
    # Run artifacts (one directory per command invocation)
    RUNS_DIR = os.getenv("KWS_RUNS_DIR", str(_BASE_DIR / "runs"))

    # Run ledger - absolute path anchored to the runs directory
    DATABASE_URL = os.getenv("KWS_DATABASE_URL", f"sqlite:///{Path(RUNS_DIR).absolute() / 'ledger.db'}")

    # Featurization threads; 1 keeps runs bitwise reproducible on any machine
    MAX_WORKERS = max(1, int(os.getenv("KWS_MAX_WORKERS", "1")))

    # Logging
    LOG_LEVEL = os.getenv("KWS_LOG_LEVEL", "INFO")
    LOGS_DIR = str(_BASE_DIR / "logs")

    SNAPSHOT_NAME = "config.snapshot.ini"


# Environment-specific configurations
class DevelopmentConfig(Config):
    DEBUG = True  # tracebacks on command errors


class ProductionConfig(Config):
    DEBUG = False
    LOG_LEVEL = os.getenv("KWS_LOG_LEVEL", "WARNING")


# Get configuration based on environment
def get_config() -> Config:
    env = os.getenv("ENVIRONMENT", "development").lower()

    if env == "production":
        return ProductionConfig()
    else:
        return DevelopmentConfig()


# Global config instance
config = get_config()


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # gsc: Speech Commands directory tree; jsonl: pre-built manifest file
    kind: str = "jsonl"
    path: Optional[str] = None
    scheme: str = "gsc12"
    name: Optional[str] = None   # label in result tables, defaults to the scheme name
    cache_dir: Optional[str] = None

    @field_validator("kind")
    @classmethod
    def _kind(cls, value):
        if value not in ("gsc", "jsonl"):
            raise ValueError("dataset.kind must be 'gsc' or 'jsonl'")
        return value

    @field_validator("scheme")
    @classmethod
    def _scheme(cls, value):
        if value not in SCHEMES:
            raise ValueError(f"unknown scheme '{value}' (known: {sorted(SCHEMES)})")
        return value

    @property
    def label(self) -> str:
        return self.name or self.scheme


class ExperimentConfig(BaseModel):
    """Every default reproduces the reference training setup"""
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    frontend: FrontendConfig = Field(default_factory=FrontendConfig)
    augment: AugmentPolicy = Field(default_factory=AugmentPolicy)
    uncertainty: UncertaintyConfig = Field(default_factory=UncertaintyConfig)
    model: ModelSpec = Field(default_factory=ModelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: SweepSpec = Field(default_factory=SweepSpec)


# INI section holding top-level scalars (seed)
TOP_SECTION = "experiment"
SECTIONS = {
    "dataset": DatasetConfig,
    "frontend": FrontendConfig,
    "augment": AugmentPolicy,
    "uncertainty": UncertaintyConfig,
    "model": ModelSpec,
    "train": TrainConfig,
    "eval": SweepSpec,
}


def _is_sequence_field(model_cls, key: str) -> bool:
    field = model_cls.model_fields.get(key)
    if field is None:
        # aliases (uncertainty.lambda)
        field = next((f for f in model_cls.model_fields.values() if f.alias == key), None)
    if field is None:
        return False
    annotation = field.annotation
    if typing.get_origin(annotation) is Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        annotation = args[0] if len(args) == 1 else annotation
    return typing.get_origin(annotation) in (list, tuple, List, Sequence)


def _scalar(text: str) -> Any:
    text = text.strip()
    if text == "":
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_value(model_cls, key: str, raw: str) -> Any:
    if raw.strip() == "null":
        return None
    if _is_sequence_field(model_cls, key):
        if raw.strip() == "":
            return []
        return [_scalar(part) for part in raw.split(",")]
    return _scalar(raw)


def _format_value(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, str):
        return value
    return json.dumps(value)


def parse_override(text: str) -> tuple:
    """'section.key=value' -> (section, key, value)"""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override '{text}' is not of the form section.key=value")
    target, value = text.split("=", 1)
    section, key = target.strip().split(".", 1)
    return section, key.strip(), value.strip()


def _raw_sections(path: Optional[Union[str, Path]]) -> Dict[str, Dict[str, str]]:
    raw: Dict[str, Dict[str, str]] = {}
    if path is None:
        return raw
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}")
    for section in parser.sections():
        raw[section] = dict(parser.items(section))
    return raw


def load_experiment_config(path: Optional[Union[str, Path]] = None,
                           overrides: Sequence[str] = ()) -> ExperimentConfig:
    """INI file (optional) + section.key=value overrides -> validated ExperimentConfig"""
    raw = _raw_sections(path)
    for text in overrides:
        section, key, value = parse_override(text)
        raw.setdefault(section, {})[key] = value

    data: Dict[str, Any] = {}
    for section, entries in raw.items():
        if section == TOP_SECTION:
            for key, value in entries.items():
                if key not in ("seed",):
                    raise ConfigError(f"unknown key '{key}' in [{TOP_SECTION}]")
                data[key] = _scalar(value)
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}] (known: {TOP_SECTION}, {', '.join(SECTIONS)})")
        model_cls = SECTIONS[section]
        # empty values fall back to the default; an explicit null clears an optional field
        data[section] = {key: _parse_value(model_cls, key, value) for key, value in entries.items()
                         if value.strip() != ""}
    try:
        return ExperimentConfig(**data)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"invalid configuration at {location}: {first['msg']} ({e.error_count()} error(s))")


def write_config_snapshot(experiment: ExperimentConfig, path: Union[str, Path]):
    """Resolved configuration as INI; load_experiment_config(path) gives it back"""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser[TOP_SECTION] = {"seed": str(experiment.seed)}
    for section in SECTIONS:
        values = getattr(experiment, section).model_dump(by_alias=True)
        parser[section] = {key: _format_value(value) for key, value in values.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
