"""Generic chat-completion adapter for live model endpoints."""
import asyncio
import logging
import os
import time
from typing import Any, Dict, List, Optional

import backoff
import httpx
import numpy as np
from pydantic import BaseModel, Field

from agent.base import AgentBackend
from app.exceptions import BackendError
from app.models import PromptBundle

logger = logging.getLogger(__name__)

DEFAULT_BODY_TEMPLATE: Dict[str, Any] = {
    "model": "$model",
    "messages": "$messages",
    "temperature": "$temperature",
    "max_tokens": "$max_tokens",
}


class EndpointConfig(BaseModel):
    """One provider endpoint. Secrets are referenced by environment variable name only."""
    name: str
    url: str
    model: str
    auth_env: Optional[str] = None
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"
    timeout_s: float = Field(default=60.0, gt=0)
    max_retries: int = Field(default=3, ge=0)
    backoff_base_s: float = Field(default=1.0, ge=0)
    rate_limit_per_min: Optional[float] = Field(default=None, gt=0)
    max_tokens: Optional[int] = 512
    headers: Dict[str, str] = Field(default_factory=dict)
    body_template: Dict[str, Any] = Field(default_factory=lambda: dict(DEFAULT_BODY_TEMPLATE))
    response_path: str = "choices.0.message.content"


class _TransientFailure(Exception):
    def __init__(self, cause: str, message: str):
        super().__init__(message)
        self.cause = cause


class RequestLimiter:
    """Global concurrent-request cap plus per-endpoint pacing."""

    def __init__(self, max_concurrent: int = 8):
        self._semaphore = asyncio.Semaphore(max_concurrent)
        self._locks: Dict[str, asyncio.Lock] = {}
        self._next_start: Dict[str, float] = {}

    async def acquire(self, endpoint: str, rate_limit_per_min: Optional[float]) -> None:
        await self._semaphore.acquire()
        if not rate_limit_per_min:
            return
        lock = self._locks.setdefault(endpoint, asyncio.Lock())
        async with lock:
            now = time.monotonic()
            start = max(now, self._next_start.get(endpoint, now))
            self._next_start[endpoint] = start + 60.0 / rate_limit_per_min
        if start > now:
            await asyncio.sleep(start - now)

    def release(self) -> None:
        self._semaphore.release()


def render_body(template: Any, values: Dict[str, Any]) -> Any:
    """Substitute "$name" placeholders anywhere in a JSON body template."""
    if isinstance(template, dict):
        return {k: render_body(v, values) for k, v in template.items()}
    if isinstance(template, list):
        return [render_body(v, values) for v in template]
    if isinstance(template, str) and template.startswith("$") and template[1:] in values:
        return values[template[1:]]
    return template


def extract_path(data: Any, path: str) -> Any:
    """Follow a dotted path of keys and list indices."""
    node = data
    for part in path.split("."):
        if isinstance(node, list):
            node = node[int(part)]
        else:
            node = node[part]
    return node


def remote_respond_body(config: EndpointConfig, prompt: PromptBundle, temperature: float) -> Dict:
    messages = prompt.messages()
    values = {
        "model": config.model,
        "messages": messages,
        "messages_without_system": [m for m in messages if m["role"] != "system"],
        "system": prompt.system_text,
        "temperature": temperature,
        "max_tokens": config.max_tokens,
    }
    return render_body(config.body_template, values)


class RemoteBackend(AgentBackend):
    """Chat-completion requests over httpx with retries and rate limiting."""

    deterministic = False

    def __init__(
        self,
        config: EndpointConfig,
        limiter: Optional[RequestLimiter] = None,
        transport: Optional[httpx.AsyncBaseTransport] = None,
    ):
        """Initialize the remote backend.

        Args:
            config: Endpoint configuration
            limiter: Shared limiter; a private one is created when omitted
            transport: Optional httpx transport (tests use httpx.MockTransport)

        Raises:
            BackendError: the configured auth environment variable is unset
        """
        super().__init__(config.model)
        self.config = config
        self.limiter = limiter or RequestLimiter()
        self._transport = transport
        self._client: Optional[httpx.AsyncClient] = None
        self._token: Optional[str] = None
        if config.auth_env:
            self._token = os.environ.get(config.auth_env)
            if not self._token:
                raise BackendError(
                    f"Environment variable {config.auth_env} not set for endpoint {config.name}",
                    cause="unresolved",
                )

    def _get_headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json", **self.config.headers}
        if self._token:
            prefix = f"{self.config.auth_scheme} " if self.config.auth_scheme else ""
            headers[self.config.auth_header] = f"{prefix}{self._token}"
        return headers

    def _get_client(self) -> httpx.AsyncClient:
        if not self._client:
            self._client = httpx.AsyncClient(timeout=self.config.timeout_s, transport=self._transport)
        return self._client

    async def aclose(self) -> None:
        if self._client:
            await self._client.aclose()
            self._client = None

    async def _post_once(self, url: str, body: Dict, attempts: List[int]) -> str:
        attempts[0] += 1
        try:
            response = await self._get_client().post(url, json=body, headers=self._get_headers())
        except httpx.TimeoutException as e:
            raise _TransientFailure("timeout", f"Request timeout to {self.config.name}: {e}")
        except httpx.TransportError as e:
            raise _TransientFailure("server_error", f"Transport error to {self.config.name}: {e}")

        if response.status_code == 429:
            raise _TransientFailure("rate_limit", f"Rate limited by {self.config.name}")
        if response.status_code >= 500:
            raise _TransientFailure(
                "server_error", f"{self.config.name} returned {response.status_code}"
            )
        if response.status_code >= 400:
            raise BackendError(
                f"{self.config.name} rejected the request: {response.status_code} {response.text[:200]}",
                cause="transport",
                attempts=attempts[0],
            )
        try:
            content = extract_path(response.json(), self.config.response_path)
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise BackendError(
                f"Malformed response from {self.config.name}: {e}",
                cause="transport",
                attempts=attempts[0],
            )
        if not isinstance(content, str):
            raise BackendError(f"Non-text content from {self.config.name}", cause="transport")
        return content

    def _log_backoff(self, details: Dict) -> None:
        logger.warning(
            f"Retrying {self.config.name} after attempt {details['tries']} "
            f"({details['exception']}); waiting {details['wait']:.2f}s"
        )

    async def respond(
        self, prompt: PromptBundle, temperature: float, rng: np.random.Generator
    ) -> str:
        """Send one chat-completion request; retries transient failures with backoff."""
        url = self.config.url.format(model=self.config.model)
        body = remote_respond_body(self.config, prompt, temperature)
        attempts = [0]
        send = backoff.on_exception(
            backoff.expo,
            _TransientFailure,
            max_tries=self.config.max_retries + 1,
            factor=self.config.backoff_base_s,
            on_backoff=self._log_backoff,
            raise_on_giveup=True,
        )(self._post_once)

        await self.limiter.acquire(self.config.name, self.config.rate_limit_per_min)
        try:
            text = await send(url, body, attempts)
        except _TransientFailure as e:
            logger.error(f"Giving up on {self.config.name} after {attempts[0]} attempts: {e}")
            raise BackendError(str(e), cause=e.cause, attempts=attempts[0])
        finally:
            self.limiter.release()

        if attempts[0] > 1:
            logger.info(f"{self.config.name} succeeded after {attempts[0]} attempts")
        return text
