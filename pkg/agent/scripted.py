"""Scripted replay backend."""
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from agent.base import AgentBackend
from app.exceptions import ScriptExhausted
from app.models import PromptBundle

logger = logging.getLogger(__name__)

DEFAULT_BALLOT = '{"decision": "A", "confidence": 50}'


def scripted_respond(script: List[str], round_index: int, cycle: bool = False) -> str:
    """Return the scripted reply for a 1-based round; cycle wraps around the script."""
    if cycle and script and round_index >= 1:
        return script[(round_index - 1) % len(script)]
    if round_index < 1 or round_index > len(script):
        raise ScriptExhausted(f"script covers {len(script)} rounds, round {round_index} requested")
    return script[round_index - 1]


class ScriptedBackend(AgentBackend):
    """Replays fixed replies per round; repairs and ballots are scripted too."""

    def __init__(
        self,
        replies: List[str],
        repairs: Optional[Dict[int, str]] = None,
        ballot: str = DEFAULT_BALLOT,
        ballot_repair: Optional[str] = None,
        clerk: Optional[str] = None,
        descriptor: str = "scripted",
        cycle: bool = False,
    ):
        """Initialize the scripted backend.

        Args:
            replies: Reply text per round (index 0 is round 1)
            repairs: Reply to the repair prompt, keyed by round
            ballot: Reply to the ballot request
            ballot_repair: Reply to the ballot repair prompt
            clerk: Reply when used as the clerk
            descriptor: Model identifier recorded in run records
            cycle: Wrap around the script instead of running out
        """
        super().__init__(descriptor)
        self.replies = list(replies)
        self.repairs = dict(repairs or {})
        self.ballot = ballot
        self.ballot_repair = ballot_repair
        self.clerk = clerk
        self.cycle = cycle
        self.calls: List[Tuple[str, int]] = []

    @classmethod
    def constant(
        cls, reply: str, rounds: int, ballot: str = DEFAULT_BALLOT, descriptor: str = "scripted"
    ) -> "ScriptedBackend":
        return cls([reply] * rounds, ballot=ballot, descriptor=descriptor)

    async def respond(
        self, prompt: PromptBundle, temperature: float, rng: np.random.Generator
    ) -> str:
        self.calls.append((prompt.kind, prompt.round))
        if prompt.kind == "turn":
            return scripted_respond(self.replies, prompt.round, self.cycle)
        if prompt.kind == "repair":
            if prompt.round in self.repairs:
                return self.repairs[prompt.round]
            return scripted_respond(self.replies, prompt.round, self.cycle)
        if prompt.kind == "ballot":
            return self.ballot
        if prompt.kind == "ballot_repair":
            return self.ballot_repair if self.ballot_repair is not None else self.ballot
        if self.clerk is None:
            raise ScriptExhausted("no clerk reply scripted")
        return self.clerk
