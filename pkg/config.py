"""
Run configuration: dataclass defaults, an optional JSON config file and
command-line overrides, in that order of precedence.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from errors import ConfigError

logger = logging.getLogger(__name__)

# Load environment variables from .env file
load_dotenv()

API_KEY_ENV = "L2T_API_KEY"
DEFAULT_BASE_URL = os.getenv("L2T_BASE_URL", "https://api.openai.com/v1")
DEFAULT_MODEL = os.getenv("L2T_MODEL", "gpt-4o")
DEFAULT_EMBEDDING_MODEL = os.getenv("L2T_EMBEDDING_MODEL", "text-embedding-3-small")

SELECTORS = ("gcn", "mlp", "fixed")
BACKENDS = ("oracle", "http")
FEATURE_SOURCES = ("hash", "embedding")
AGGREGATIONS = ("max", "mean")


def get_env_var(var_name: str, required: bool = True) -> Optional[str]:
    """Get environment variable with validation.

    Args:
        var_name: Name of the environment variable
        required: Raise when the variable is unset or empty

    Returns:
        The value, or None when optional and unset
    """
    value = os.getenv(var_name)
    if required and not value:
        raise ConfigError(f"Required environment variable {var_name} is not set")
    return value


@dataclass
class EpisodeConfig:
    beta: int = 2
    max_steps: int = 12
    max_nodes: int = 64
    regen_limit: int = 1
    classify_parallelism: int = 4
    reward_aggregation: str = "max"
    feature_dim: int = 64
    selector: str = "gcn"
    fixed_mode: Dict[str, Any] = field(default_factory=lambda: {
        "branch_count": 3, "temperature": 0.7, "top_p": 1.0, "use_dependency": False,
    })
    # Classify and Evaluate calls run with these fixed sampling settings
    judge_temperature: float = 0.05
    judge_top_p: float = 1.0
    regen_temperature: float = 1.0
    max_tokens: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.beta < 1:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.max_steps < 0 or self.max_nodes < 1:
            raise ConfigError(f"Invalid budgets: max_steps={self.max_steps}, max_nodes={self.max_nodes}")
        if self.regen_limit < 0 or self.classify_parallelism < 1:
            raise ConfigError("regen_limit must be >= 0 and classify_parallelism >= 1")
        if self.reward_aggregation not in AGGREGATIONS:
            raise ConfigError(f"reward_aggregation must be one of {AGGREGATIONS}")
        if self.selector not in SELECTORS:
            raise ConfigError(f"selector must be one of {SELECTORS}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")


@dataclass
class TrainConfig:
    lr: float = 5e-3
    epochs: int = 20
    clip_eps: float = 0.2
    max_grad_norm: float = 0.5
    gamma: float = 0.99
    lam: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    minibatch_size: Optional[int] = None  # None means the full buffer
    normalize_advantages: bool = True
    hidden: int = 64
    max_branches: int = 5
    rounds: int = 5
    episodes_per_round: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.lam <= 1.0):
            raise ConfigError(f"gamma and lam must lie in (0, 1], got {self.gamma}, {self.lam}")
        if self.lr <= 0 or self.epochs < 1 or self.max_grad_norm <= 0:
            raise ConfigError("lr, epochs and max_grad_norm must be positive")
        if self.minibatch_size is not None and self.minibatch_size < 1:
            raise ConfigError("minibatch_size must be positive when set")


@dataclass
class OracleConfig:
    seed: int = 0
    error_rate: float = 0.0
    pad_with_dead_ends: bool = False

    def __post_init__(self):
        if not 0.0 <= self.error_rate <= 1.0:
            raise ConfigError(f"error_rate must lie in [0, 1], got {self.error_rate}")


@dataclass
class HttpConfig:
    base_url: str = DEFAULT_BASE_URL
    model: str = DEFAULT_MODEL
    embedding_model: str = DEFAULT_EMBEDDING_MODEL
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0


@dataclass
class RunConfig:
    task: Optional[str] = None
    family: str = "game24"
    generator_seed: int = 0
    backend: str = "oracle"
    feature_source: str = "hash"
    checkpoint: Optional[str] = None
    templates_dir: Optional[str] = None
    output_dir: str = "runs"
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    http: HttpConfig = field(default_factory=HttpConfig)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.feature_source not in FEATURE_SOURCES:
            raise ConfigError(f"feature_source must be one of {FEATURE_SOURCES}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _build(cls, data: Dict[str, Any]):
    """Instantiate a (possibly nested) config dataclass from a plain dict."""
    if not isinstance(data, dict):
        raise ConfigError(f"Expected an object for {cls.__name__}, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        field_type = known[name].type
        if isinstance(field_type, type) and is_dataclass(field_type):
            kwargs[name] = _build(field_type, value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"Invalid {cls.__name__}: {e}") from e


def load_config(path: Optional[str] = None) -> RunConfig:
    """Load a RunConfig from a JSON file, or return the defaults."""
    if path is None:
        return RunConfig()
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {config_path}")
    try:
        data = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {config_path} is not valid JSON: {e}") from e
    logger.info(f"Loaded config from {config_path}")
    return _build(RunConfig, data)


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Apply dotted-key overrides (e.g. ``episode.max_steps``); None values are skipped."""
    data = config.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        target = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise ConfigError(f"Unknown config section in override {key!r}")
            target = target[part]
        if parts[-1] not in target:
            raise ConfigError(f"Unknown config key in override {key!r}")
        target[parts[-1]] = value
        logger.debug(f"Config override {key}={value!r}")
    return _build(RunConfig, data)


def save_config(config: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
