"""Synthetic agents with known stability properties.

Two families are provided. Consensus dynamics mix an agent's own state with the
committee mean in log space and map back through a sharpened softmax; the
contraction/expansion regime is set by alpha + beta. The logistic driver embeds
the logistic map x -> r x (1 - x), whose exponent at r = 4 is ln 2.
"""
import json
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy.special import softmax

from agent.base import AgentBackend
from app.models import OPTIONS, PreferenceState, PromptBundle
from app.state_codec import format_state_line

logger = logging.getLogger(__name__)

LOGIT_FLOOR = 1e-12
LOGISTIC_EDGE = 1e-12


class ConsensusDynamicsParams(BaseModel):
    alpha: float = Field(default=1.0, ge=0.0)
    beta: float = Field(default=0.0, ge=0.0)
    gamma: float = Field(default=0.0, ge=0.0)
    role_bias: List[List[float]] = Field(default_factory=list)
    sharpness: float = Field(default=1.0, gt=0.0)
    initial: Optional[Tuple[float, float, float]] = None
    initial_concentration: float = Field(default=1.0, gt=0.0)

    @field_validator("role_bias")
    @classmethod
    def _finite_bias(cls, v: List[List[float]]) -> List[List[float]]:
        for row in v:
            if len(row) != 3 or not all(math.isfinite(x) for x in row):
                raise ValueError(f"bias vectors need three finite values: {row}")
        return v

    def bias_for(self, agent_index: int) -> np.ndarray:
        if not self.role_bias:
            return np.zeros(3)
        return np.asarray(self.role_bias[agent_index % len(self.role_bias)], dtype=float)


class LogisticDriverParams(BaseModel):
    r: float = Field(default=4.0, gt=0.0, le=4.0)
    x0: float = Field(default=0.3, gt=0.0, lt=1.0)
    jitter: float = Field(default=0.0, ge=0.0)


def _logit(p: Sequence[float]) -> np.ndarray:
    return np.log(np.maximum(np.asarray(p, dtype=float), LOGIT_FLOOR))


def _state_from(pref: Sequence[float], tags: List[str]) -> PreferenceState:
    p = np.asarray(pref, dtype=float)
    p = p / p.sum()
    conf = int(round(100 * float(p.max())))
    return PreferenceState(pref=(float(p[0]), float(p[1]), float(p[2])), conf=conf, tags=tags)


def consensus_step(
    params: ConsensusDynamicsParams,
    own_state: Sequence[float],
    state_table: Dict[int, Sequence[float]],
    agent_index: int,
    rng: np.random.Generator,
) -> str:
    """One consensus-dynamics turn: argument stub plus STATE line.

    New logits are alpha*logit(own) + beta*logit(committee mean) + bias + gamma*noise,
    mapped back with softmax(sharpness * logits).
    """
    prefs = {i: np.asarray(p, dtype=float) for i, p in state_table.items()}
    prefs[agent_index] = np.asarray(own_state, dtype=float)
    committee_mean = np.mean(list(prefs.values()), axis=0)

    logits = params.alpha * _logit(own_state) + params.beta * _logit(committee_mean)
    logits = logits + params.bias_for(agent_index)
    if params.gamma > 0:
        logits = logits + params.gamma * rng.standard_normal(3)
    state = _state_from(softmax(params.sharpness * logits), ["consensus", "dynamics"])
    return f"I move toward option {state.top_option}.\n{format_state_line(state)}"


def logistic_orbit(r: float, x0: float, steps: int) -> List[float]:
    """Iterates x_1..x_steps, kept inside the open unit interval."""
    xs = []
    x = x0
    for _ in range(steps):
        x = r * x * (1.0 - x)
        x = min(max(x, LOGISTIC_EDGE), 1.0 - LOGISTIC_EDGE)
        xs.append(x)
    return xs


def logistic_embedding(x: float) -> Tuple[float, float, float]:
    return (x, (1.0 - x) / 2.0, (1.0 - x) / 2.0)


def logistic_step(params: LogisticDriverParams, round_index: int, x0: Optional[float] = None) -> str:
    """STATE line embedding x_round of the logistic map."""
    start = params.x0 if x0 is None else x0
    x = logistic_orbit(params.r, start, round_index)[-1]
    state = _state_from(logistic_embedding(x), ["logistic", "driver"])
    return f"Driver value {x:.6f}.\n{format_state_line(state)}"


def _ballot_from(prompt: PromptBundle) -> str:
    own = prompt.state_table.get(prompt.agent_index)
    if own is None:
        return json.dumps({"decision": OPTIONS[0], "confidence": 0})
    return json.dumps({"decision": own.top_option, "confidence": own.conf})


class ConsensusBackend(AgentBackend):
    """Agents following consensus dynamics over the committee state table."""

    def __init__(self, params: ConsensusDynamicsParams, descriptor: str = "consensus"):
        super().__init__(descriptor)
        self.params = params

    def _initial_state(self, prompt: PromptBundle, rng: np.random.Generator) -> Tuple[float, ...]:
        if self.params.initial is not None:
            return tuple(self.params.initial)
        draw = rng.dirichlet([self.params.initial_concentration] * 3)
        return tuple(float(x) for x in draw)

    async def respond(
        self, prompt: PromptBundle, temperature: float, rng: np.random.Generator
    ) -> str:
        if prompt.kind in ("ballot", "ballot_repair", "clerk"):
            return _ballot_from(prompt)
        table = {i: s.pref for i, s in prompt.state_table.items()}
        own = table.get(prompt.agent_index)
        if own is None:
            own = self._initial_state(prompt, rng)
        return consensus_step(self.params, own, table, prompt.agent_index, rng)


def _orbit_seed(prompt: PromptBundle) -> int:
    return prompt.run_seed if prompt.origin_seed is None else prompt.origin_seed


class LogisticBackend(AgentBackend):
    """Every seat emits the logistic-map embedding for the current round."""

    def __init__(self, params: LogisticDriverParams, descriptor: str = "logistic"):
        super().__init__(descriptor)
        self.params = params

    def start_value(self, run_seed: int) -> float:
        if self.params.jitter == 0:
            return self.params.x0
        offset = np.random.default_rng(run_seed).uniform(-1.0, 1.0) * self.params.jitter
        return min(max(self.params.x0 + offset, LOGISTIC_EDGE), 1.0 - LOGISTIC_EDGE)

    async def respond(
        self, prompt: PromptBundle, temperature: float, rng: np.random.Generator
    ) -> str:
        if prompt.kind in ("ballot", "ballot_repair", "clerk"):
            return _ballot_from(prompt)
        return logistic_step(self.params, prompt.round, x0=self.start_value(_orbit_seed(prompt)))
