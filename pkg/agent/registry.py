"""Backend registry: resolves model identifiers to backend instances."""
import logging
from typing import Callable, Dict, List, Literal, Optional

from pydantic import BaseModel, Field

from agent.base import AgentBackend
from agent.remote import EndpointConfig, RemoteBackend, RequestLimiter
from agent.scripted import DEFAULT_BALLOT, ScriptedBackend
from agent.synthetic import (
    ConsensusBackend,
    ConsensusDynamicsParams,
    LogisticBackend,
    LogisticDriverParams,
)
from app.exceptions import BackendError

logger = logging.getLogger(__name__)


class BackendSpec(BaseModel):
    """Configuration entry naming one backend; `name` is the model identifier used in lineups."""
    name: str
    kind: Literal["scripted", "consensus", "logistic", "remote"]
    replies: List[str] = Field(default_factory=list)
    repairs: Dict[int, str] = Field(default_factory=dict)
    ballot: str = DEFAULT_BALLOT
    ballot_repair: Optional[str] = None
    clerk: Optional[str] = None
    cycle: bool = False
    consensus: ConsensusDynamicsParams = Field(default_factory=ConsensusDynamicsParams)
    logistic: LogisticDriverParams = Field(default_factory=LogisticDriverParams)
    endpoint: Optional[str] = None


def build_backend(
    spec: BackendSpec,
    endpoints: Dict[str, EndpointConfig],
    limiter: RequestLimiter,
) -> AgentBackend:
    """Instantiate the backend a spec describes.

    Raises:
        BackendError: remote spec naming an unknown endpoint, or missing secret
    """
    if spec.kind == "scripted":
        return ScriptedBackend(
            spec.replies,
            repairs=spec.repairs,
            ballot=spec.ballot,
            ballot_repair=spec.ballot_repair,
            clerk=spec.clerk,
            descriptor=spec.name,
            cycle=spec.cycle,
        )
    if spec.kind == "consensus":
        return ConsensusBackend(spec.consensus, descriptor=spec.name)
    if spec.kind == "logistic":
        return LogisticBackend(spec.logistic, descriptor=spec.name)

    endpoint_name = spec.endpoint or spec.name
    if endpoint_name not in endpoints:
        raise BackendError(f"No endpoint configured for {spec.name}", cause="unresolved")
    return RemoteBackend(endpoints[endpoint_name], limiter=limiter)


class BackendRegistry:
    """Registry for resolving committee slot models to backends.

    Scripted and synthetic backends are built fresh for every resolution so
    concurrent replicates never share mutable state; remote backends are
    cached so their HTTP client and rate limiter are shared.
    """

    def __init__(
        self,
        specs: Optional[List[BackendSpec]] = None,
        endpoints: Optional[List[EndpointConfig]] = None,
        max_concurrent_requests: int = 8,
    ):
        self._specs: Dict[str, BackendSpec] = {}
        self._factories: Dict[str, Callable[[], AgentBackend]] = {}
        self._remote: Dict[str, AgentBackend] = {}
        self._endpoints: Dict[str, EndpointConfig] = {e.name: e for e in endpoints or []}
        self._limiter = RequestLimiter(max_concurrent_requests)
        for spec in specs or []:
            self.register_spec(spec)

    def register_spec(self, spec: BackendSpec) -> None:
        if spec.name in self._specs or spec.name in self._factories:
            logger.warning(f"Backend {spec.name} registered twice; the later entry wins")
        self._specs[spec.name] = spec
        logger.debug(f"Registered backend spec: {spec.name} ({spec.kind})")

    def register_factory(self, name: str, factory: Callable[[], AgentBackend]) -> None:
        """Register a callable producing a backend; takes precedence over specs."""
        self._factories[name] = factory

    def names(self) -> List[str]:
        return sorted(set(self._specs) | set(self._factories))

    def resolve(self, name: str) -> AgentBackend:
        """Return a backend for a model identifier.

        Raises:
            BackendError: cause "unresolved" when the name cannot be bound
        """
        if name in self._factories:
            return self._factories[name]()
        spec = self._specs.get(name)
        if spec is None:
            raise BackendError(f"Unknown backend: {name}", cause="unresolved")
        if spec.kind != "remote":
            return build_backend(spec, self._endpoints, self._limiter)
        if name not in self._remote:
            self._remote[name] = build_backend(spec, self._endpoints, self._limiter)
        return self._remote[name]

    def resolve_lineup(self, models: List[str]) -> List[AgentBackend]:
        """Backends for every committee slot, in slot order."""
        return [self.resolve(model) for model in models]

    async def aclose(self) -> None:
        for backend in self._remote.values():
            try:
                await backend.aclose()
            except Exception as e:
                logger.error(f"Error closing backend {backend!r}: {e}")
        self._remote.clear()
