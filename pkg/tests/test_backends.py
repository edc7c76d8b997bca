"""Scripted, synthetic and remote backends, and the backend registry."""
import asyncio
import json

import httpx
import numpy as np
import pytest

from agent.registry import BackendRegistry, BackendSpec
from agent.remote import EndpointConfig, RemoteBackend, extract_path, render_body
from agent.scripted import ScriptedBackend, scripted_respond
from agent.synthetic import (
    ConsensusBackend,
    ConsensusDynamicsParams,
    LogisticBackend,
    LogisticDriverParams,
    consensus_step,
    logistic_orbit,
    logistic_step,
)
from app.exceptions import BackendError, ScriptExhausted
from app.models import PromptBundle
from app.state_codec import parse_state_line


def run(coro):
    return asyncio.run(coro)


def _pref(reply: str):
    outcome = parse_state_line(reply)
    assert outcome.ok, reply
    return np.asarray(outcome.state.pref)


# ==================== Scripted ====================

def test_scripted_respond_bounds():
    script = ["r1", "r2"]
    assert scripted_respond(script, 2) == "r2"
    with pytest.raises(ScriptExhausted):
        scripted_respond(script, 3)
    with pytest.raises(ScriptExhausted):
        scripted_respond(script, 0)
    assert scripted_respond(script, 3, cycle=True) == "r1"


def test_scripted_backend_routes_by_prompt_kind():
    backend = ScriptedBackend(["turn-1"], repairs={1: "fixed"}, ballot="vote", clerk="tally")
    rng = np.random.default_rng(0)
    assert run(backend.respond(PromptBundle(kind="turn", round=1), 0.0, rng)) == "turn-1"
    assert run(backend.respond(PromptBundle(kind="repair", round=1), 0.0, rng)) == "fixed"
    assert run(backend.respond(PromptBundle(kind="ballot", round=2), 0.0, rng)) == "vote"
    assert run(backend.respond(PromptBundle(kind="clerk", round=2), 0.0, rng)) == "tally"
    assert backend.calls == [("turn", 1), ("repair", 1), ("ballot", 2), ("clerk", 2)]


# ==================== Synthetic ====================

def test_consensus_identity_map():
    params = ConsensusDynamicsParams(alpha=1.0, beta=0.0, gamma=0.0)
    own = (0.5, 0.3, 0.2)
    reply = consensus_step(params, own, {1: (0.1, 0.1, 0.8)}, 0, np.random.default_rng(0))
    np.testing.assert_allclose(_pref(reply), own, atol=1e-6)


def test_consensus_mean_step():
    params = ConsensusDynamicsParams(alpha=0.0, beta=1.0, gamma=0.0)
    table = {0: (0.6, 0.2, 0.2), 1: (0.2, 0.6, 0.2), 2: (0.1, 0.1, 0.8)}
    reply = consensus_step(params, table[0], table, 0, np.random.default_rng(0))
    np.testing.assert_allclose(_pref(reply), np.mean(list(table.values()), axis=0), atol=1e-6)


def test_consensus_noise_is_seeded():
    params = ConsensusDynamicsParams(alpha=1.0, beta=0.5, gamma=0.3)
    table = {0: (0.4, 0.3, 0.3), 1: (0.2, 0.5, 0.3)}
    a = consensus_step(params, table[0], table, 0, np.random.default_rng(42))
    b = consensus_step(params, table[0], table, 0, np.random.default_rng(42))
    c = consensus_step(params, table[0], table, 0, np.random.default_rng(43))
    assert a == b
    assert a != c


def test_consensus_backend_draws_initial_state_once():
    backend = ConsensusBackend(ConsensusDynamicsParams(initial=(0.2, 0.5, 0.3)))
    prompt = PromptBundle(kind="turn", round=1, agent_index=0)
    reply = run(backend.respond(prompt, 0.0, np.random.default_rng(0)))
    np.testing.assert_allclose(_pref(reply), (0.2, 0.5, 0.3), atol=1e-6)


def test_logistic_single_step():
    assert logistic_orbit(4.0, 0.3, 1) == [pytest.approx(0.84)]
    reply = logistic_step(LogisticDriverParams(r=4.0, x0=0.3), 1)
    np.testing.assert_allclose(_pref(reply), (0.84, 0.08, 0.08), atol=1e-6)


def test_logistic_orbit_stays_inside_the_interval():
    orbit = np.asarray(logistic_orbit(4.0, 0.123456, 10_000))
    assert np.all((orbit > 0.0) & (orbit < 1.0))


def test_logistic_orbit_converges_at_r2():
    assert logistic_orbit(2.0, 0.2, 60)[-1] == pytest.approx(0.5, abs=1e-9)


def test_logistic_jitter_depends_on_run_seed():
    backend = LogisticBackend(LogisticDriverParams(x0=0.4, jitter=1e-3))
    assert backend.start_value(1) == backend.start_value(1)
    assert backend.start_value(1) != backend.start_value(2)
    assert abs(backend.start_value(1) - 0.4) <= 1e-3
    assert LogisticBackend(LogisticDriverParams(x0=0.4)).start_value(9) == 0.4


def test_synthetic_ballot_follows_own_state():
    backend = ConsensusBackend(ConsensusDynamicsParams())
    state = parse_state_line(
        'STATE: pref=[0.1,0.7,0.2]; conf=70; tags=["a","b"]'
    ).state
    prompt = PromptBundle(kind="ballot", agent_index=1, state_table={1: state})
    ballot = json.loads(run(backend.respond(prompt, 0.0, np.random.default_rng(0))))
    assert ballot == {"decision": "B", "confidence": 70}


# ==================== Remote ====================

def _endpoint(**overrides):
    fields = dict(
        name="openai-mini",
        url="https://api.example.test/v1/chat/completions",
        model="gpt-4.1-mini",
        auth_env="TEST_API_KEY",
        max_retries=3,
        backoff_base_s=0.0,
    )
    fields.update(overrides)
    return EndpointConfig(**fields)


def _completion(text: str) -> dict:
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def _prompt() -> PromptBundle:
    return PromptBundle(kind="turn", round=1, system_text="system", scenario_text="scenario")


def test_remote_sends_temperature_and_auth(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    seen = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        return httpx.Response(200, json=_completion("hello"))

    backend = RemoteBackend(_endpoint(), transport=httpx.MockTransport(handler))
    assert run(backend.respond(_prompt(), 0.0, np.random.default_rng(0))) == "hello"
    body = json.loads(seen[0].content)
    assert body["temperature"] == 0.0
    assert body["model"] == "gpt-4.1-mini"
    assert body["messages"][0] == {"role": "system", "content": "system"}
    assert seen[0].headers["Authorization"] == "Bearer sk-test"


def test_remote_retries_rate_limit(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    statuses = [429, 200]

    def handler(request):
        status = statuses.pop(0)
        if status == 429:
            return httpx.Response(429, json={"error": "slow down"})
        return httpx.Response(200, json=_completion("after retry"))

    backend = RemoteBackend(_endpoint(), transport=httpx.MockTransport(handler))
    assert run(backend.respond(_prompt(), 0.0, np.random.default_rng(0))) == "after retry"
    assert statuses == []


def test_remote_gives_up_after_repeated_timeouts(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    calls = []

    def handler(request):
        calls.append(request)
        raise httpx.ReadTimeout("timed out", request=request)

    backend = RemoteBackend(_endpoint(max_retries=2), transport=httpx.MockTransport(handler))
    with pytest.raises(BackendError) as info:
        run(backend.respond(_prompt(), 0.0, np.random.default_rng(0)))
    assert info.value.cause == "timeout"
    assert info.value.attempts == 3
    assert len(calls) == 3


def test_remote_server_errors_are_retried_client_errors_are_not(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    calls = []

    def handler(request):
        calls.append(request)
        return httpx.Response(503 if len(calls) == 1 else 400, text="bad")

    backend = RemoteBackend(_endpoint(), transport=httpx.MockTransport(handler))
    with pytest.raises(BackendError) as info:
        run(backend.respond(_prompt(), 0.0, np.random.default_rng(0)))
    assert info.value.cause == "transport"
    assert len(calls) == 2


def test_remote_malformed_response(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    transport = httpx.MockTransport(lambda request: httpx.Response(200, json={"unexpected": 1}))
    backend = RemoteBackend(_endpoint(), transport=transport)
    with pytest.raises(BackendError) as info:
        run(backend.respond(_prompt(), 0.0, np.random.default_rng(0)))
    assert info.value.cause == "transport"


def test_remote_requires_the_secret(monkeypatch):
    monkeypatch.delenv("TEST_API_KEY", raising=False)
    with pytest.raises(BackendError) as info:
        RemoteBackend(_endpoint())
    assert info.value.cause == "unresolved"


def test_custom_body_template_and_response_path(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "key")
    config = _endpoint(
        auth_header="x-api-key",
        auth_scheme="",
        headers={"anthropic-version": "2023-06-01"},
        body_template={
            "model": "$model", "system": "$system", "messages": "$messages_without_system",
            "max_tokens": "$max_tokens", "temperature": "$temperature",
        },
        response_path="content.0.text",
    )
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json={"content": [{"type": "text", "text": "ok"}]})

    backend = RemoteBackend(config, transport=httpx.MockTransport(handler))
    assert run(backend.respond(_prompt(), 0.3, np.random.default_rng(0))) == "ok"
    body = json.loads(seen[0].content)
    assert body["system"] == "system"
    assert all(m["role"] != "system" for m in body["messages"])
    assert seen[0].headers["x-api-key"] == "key"
    assert seen[0].headers["anthropic-version"] == "2023-06-01"


def test_render_body_and_extract_path():
    body = render_body({"a": "$x", "b": ["$y", "literal"], "c": "$missing"}, {"x": 1, "y": 2})
    assert body == {"a": 1, "b": [2, "literal"], "c": "$missing"}
    assert extract_path({"a": [{"b": "c"}]}, "a.0.b") == "c"


# ==================== Registry ====================

def test_registry_resolves_specs_and_rejects_unknown_names():
    registry = BackendRegistry(specs=[
        BackendSpec(name="scripted-agent", kind="scripted", replies=["r"]),
        BackendSpec(name="drift", kind="consensus"),
    ])
    first = registry.resolve("scripted-agent")
    assert isinstance(first, ScriptedBackend)
    assert first is not registry.resolve("scripted-agent")
    assert first.descriptor == "scripted-agent"
    assert isinstance(registry.resolve("drift"), ConsensusBackend)
    assert registry.names() == ["drift", "scripted-agent"]
    with pytest.raises(BackendError) as info:
        registry.resolve("missing-model")
    assert info.value.cause == "unresolved"


def test_registry_factories_take_precedence():
    registry = BackendRegistry(specs=[BackendSpec(name="x", kind="consensus")])
    registry.register_factory("x", lambda: ScriptedBackend(["r"], descriptor="x"))
    assert isinstance(registry.resolve("x"), ScriptedBackend)


def test_registry_caches_remote_backends(monkeypatch):
    monkeypatch.setenv("TEST_API_KEY", "sk-test")
    registry = BackendRegistry(
        specs=[
            BackendSpec(name="gpt-4.1-mini", kind="remote", endpoint="openai-mini"),
            BackendSpec(name="orphan", kind="remote", endpoint="nowhere"),
        ],
        endpoints=[_endpoint()],
    )
    assert registry.resolve("gpt-4.1-mini") is registry.resolve("gpt-4.1-mini")
    with pytest.raises(BackendError) as info:
        registry.resolve("orphan")
    assert info.value.cause == "unresolved"
    run(registry.aclose())
