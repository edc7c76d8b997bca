"""Shared fixtures: state-line replies, conditions and hand-built run records."""
from typing import List, Optional, Sequence

import numpy as np
import pytest

from agent.scripted import ScriptedBackend
from app.models import (
    AgentSlot,
    Ballot,
    Condition,
    ParseOutcome,
    PreferenceState,
    Role,
    RunRecord,
    TurnRecord,
)
from app.protocol import clerk_aggregate
from app.state_codec import format_state_line


def state_reply(pref, conf: int = 50, tags=("alpha", "beta"), prose: str = "My argument.") -> str:
    state = PreferenceState(pref=tuple(pref), conf=conf, tags=list(tags))
    return f"{prose}\n{format_state_line(state)}"


def ballot_reply(decision: str, confidence: int = 60) -> str:
    return f'{{"decision": "{decision}", "confidence": {confidence}}}'


def build_run(
    prefs,
    decisions: Optional[Sequence[str]] = None,
    run_id: str = "run-000",
    condition: Optional[Condition] = None,
    seed: int = 0,
) -> RunRecord:
    """Non-excluded run whose round-r, agent-i state is prefs[r-1][i]."""
    prefs = np.asarray(prefs, dtype=float)
    rounds, n, _ = prefs.shape
    condition = condition or Condition(scenario_id="HL-01", committee_size=n, rounds=rounds)
    turns = []
    for r in range(rounds):
        for i in range(n):
            state = PreferenceState(
                pref=tuple(float(x) for x in prefs[r, i]), conf=50, tags=["t_one", "t_two"]
            )
            turns.append(
                TurnRecord(
                    round=r + 1, agent_index=i, role=Role.NONE,
                    parse=ParseOutcome(state=state), state=state,
                )
            )
    decisions = list(decisions or ["A"] * n)
    ballots = [Ballot(agent_index=i, decision=d, confidence=50) for i, d in enumerate(decisions)]
    return RunRecord(
        run_id=run_id,
        condition=condition,
        seed=seed,
        agent_order=list(range(n)),
        agents=[
            AgentSlot(agent_index=i, role=Role.NONE, label=f"Agent {i + 1}", model="scripted")
            for i in range(n)
        ],
        turns=turns,
        ballots=ballots,
        clerk=clerk_aggregate(ballots),
    )


@pytest.fixture
def run_factory():
    return build_run


@pytest.fixture
def valid_reply():
    return state_reply((0.6, 0.3, 0.1), conf=70, tags=("access", "cost"))


@pytest.fixture
def small_condition():
    return Condition(scenario_id="HL-01", committee_size=5, rounds=3)


@pytest.fixture
def constant_lineup(valid_reply):
    def make(n: int = 5, rounds: int = 3, ballot: str = ballot_reply("A")) -> List[ScriptedBackend]:
        return [ScriptedBackend.constant(valid_reply, rounds, ballot=ballot) for _ in range(n)]
    return make
