"""Matrix and endpoint configuration loaded from YAML."""
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from agent.registry import BackendRegistry, BackendSpec
from agent.remote import EndpointConfig
from app.exceptions import ConfigError
from app.models import COMMITTEE_ROLES, DEFAULT_MEMORY_WINDOW, Role

logger = logging.getLogger(__name__)

BUNDLED_SCENARIOS = Path(__file__).parent / "data" / "scenarios.yaml"

DEFAULTS = {
    "rounds": 20,
    "committee_size": 5,
    "memory_window": DEFAULT_MEMORY_WINDOW,
    "fit_window": (3, 20),
    "bootstrap": 500,
    "permutations": 2000,
    "target_replicates": 20,
    "tolerance": 0.02,
}

# Mixed lineup: one provider per role, Chair through Security.
MIXED_LINEUP = ["gpt-4.1", "claude-sonnet-4.6", "gemini-2.5-flash", "grok-3-mini", "gpt-4.1-mini"]
UNIFORM_MODEL = "gpt-4.1-mini"


class Lineups(BaseModel):
    uniform: Union[str, List[str]] = UNIFORM_MODEL
    mixed: List[str] = Field(default_factory=lambda: list(MIXED_LINEUP))


class MatrixConfig(BaseModel):
    """Experiment matrix: the axes are crossed, then repeated per replicate."""
    output_dir: str = "runs"
    master_seed: int = 0
    scenarios: List[str]
    scenarios_file: Optional[str] = None
    temperatures: List[float] = Field(default_factory=lambda: [0.0])
    roles: List[bool] = Field(default_factory=lambda: [False, True])
    compositions: List[Literal["uniform", "mixed"]] = Field(default_factory=lambda: ["uniform"])
    memory_windows: List[int] = Field(default_factory=lambda: [DEFAULT_MEMORY_WINDOW])
    ablation_targets: List[Optional[Role]] = Field(default_factory=lambda: [None])
    scenario_variants: List[Optional[str]] = Field(default_factory=lambda: [None])
    rounds: int = Field(default=DEFAULTS["rounds"], ge=2)
    committee_size: int = Field(default=DEFAULTS["committee_size"], ge=2)
    target_replicates: int = Field(default=DEFAULTS["target_replicates"], ge=1)
    parallelism: int = Field(default=4, ge=1)
    strict_parse: bool = False
    clerk_mode: Literal["tally", "agent"] = "tally"
    clerk_model: Optional[str] = None
    lineups: Lineups = Field(default_factory=Lineups)
    backends: List[BackendSpec] = Field(default_factory=list)
    endpoints_file: Optional[str] = None
    max_concurrent_requests: int = Field(default=8, ge=1)

    @field_validator(
        "scenarios", "temperatures", "roles", "compositions", "memory_windows",
        "ablation_targets", "scenario_variants",
    )
    @classmethod
    def _non_empty(cls, v: List, info) -> List:
        if not v:
            raise ValueError(f"{info.field_name} must not be empty")
        return v

    @field_validator("memory_windows")
    @classmethod
    def _positive_windows(cls, v: List[int]) -> List[int]:
        if any(k < 1 for k in v):
            raise ValueError(f"memory windows must be at least 1: {v}")
        return v

    @field_validator("ablation_targets")
    @classmethod
    def _committee_roles(cls, v: List[Optional[Role]]) -> List[Optional[Role]]:
        for target in v:
            if target is not None and target not in COMMITTEE_ROLES:
                raise ValueError(f"cannot ablate {target.value}")
        return v

    @model_validator(mode="after")
    def _check_lineups(self) -> "MatrixConfig":
        if "mixed" in self.compositions and len(self.lineups.mixed) != self.committee_size:
            raise ValueError(
                f"mixed lineup lists {len(self.lineups.mixed)} models for N={self.committee_size}"
            )
        uniform = self.lineups.uniform
        if isinstance(uniform, list) and len(uniform) not in (1, self.committee_size):
            raise ValueError(f"uniform lineup lists {len(uniform)} models for N={self.committee_size}")
        if self.clerk_mode == "agent" and not self.clerk_model:
            raise ValueError("clerk_mode 'agent' needs clerk_model")
        return self

    def lineup(self, composition: str) -> List[str]:
        """Model identifier per committee slot."""
        if composition == "mixed":
            return list(self.lineups.mixed)
        uniform = self.lineups.uniform
        if isinstance(uniform, str):
            return [uniform] * self.committee_size
        return list(uniform) * (self.committee_size // len(uniform))

    def scenarios_path(self, base: Optional[Path] = None) -> Path:
        if not self.scenarios_file:
            return BUNDLED_SCENARIOS
        path = Path(self.scenarios_file)
        if base is not None and not path.is_absolute():
            path = base / path
        return path


class EndpointFile(BaseModel):
    endpoints: List[EndpointConfig] = Field(default_factory=list)


def _read_yaml(path: Path) -> Dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return data


def load_matrix_config(path: Union[str, Path]) -> MatrixConfig:
    """Load and validate a matrix configuration file.

    Raises:
        ConfigError: invalid YAML or failed validation
        OSError: unreadable file
    """
    path = Path(path)
    data = _read_yaml(path)
    try:
        config = MatrixConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}")
    logger.info(f"Loaded matrix config from {path}: {len(config.scenarios)} scenarios")
    return config


def load_endpoints(path: Union[str, Path]) -> List[EndpointConfig]:
    path = Path(path)
    try:
        endpoints = EndpointFile.model_validate(_read_yaml(path)).endpoints
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}")
    names = [e.name for e in endpoints]
    if len(names) != len(set(names)):
        raise ConfigError(f"{path}: duplicate endpoint names")
    return endpoints


def build_registry(config: MatrixConfig, base: Optional[Path] = None) -> BackendRegistry:
    """Backend registry for a matrix config; endpoint paths resolve relative to `base`."""
    endpoints: List[EndpointConfig] = []
    if config.endpoints_file:
        path = Path(config.endpoints_file)
        if base is not None and not path.is_absolute():
            path = base / path
        endpoints = load_endpoints(path)
    return BackendRegistry(
        specs=config.backends,
        endpoints=endpoints,
        max_concurrent_requests=config.max_concurrent_requests,
    )
