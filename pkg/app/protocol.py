"""Windowed-summary deliberation protocol.

One session owns one replicate: a fixed agent order drawn from the run seed,
one rng stream per committee slot, the transcript and the state table. Rounds
are strictly sequential; every reply is parsed before the next agent's
context is assembled.
"""
import json
import logging
import math
import re
from collections import Counter
from datetime import datetime, timezone
from typing import List, Optional, Sequence, Tuple

import numpy as np

from agent.base import AgentBackend
from app.exceptions import BackendError, ProtocolError, ScriptExhausted
from app.models import (
    OPTIONS,
    AgentSlot,
    Ballot,
    CommitteeDecision,
    Condition,
    ExclusionReason,
    PromptBundle,
    Role,
    RoleMandate,
    RunRecord,
    ScenarioPacket,
    StateTable,
    TurnRecord,
)
from app.prompts import (
    BALLOT_PROMPT,
    BALLOT_REPAIR_PROMPT,
    ROLE_MANDATES,
    clerk_prompt,
    system_text,
    turn_instruction,
)
from app.state_codec import DEFAULT_TOLERANCE, parse_state_line, repair_prompt, strip_state_lines

logger = logging.getLogger(__name__)

_JSON_OBJECT_RE = re.compile(r"\{[^{}]*\}")

_CAUSE_REASONS = {
    "timeout": ExclusionReason.BACKEND_TIMEOUT,
    "rate_limit": ExclusionReason.BACKEND_RATE_LIMIT,
    "server_error": ExclusionReason.BACKEND_SERVER_ERROR,
}


# ==================== Mandates ====================

def build_mandates(condition: Condition) -> List[RoleMandate]:
    """Mandate per committee slot, with the condition's ablation applied."""
    if not condition.roles_enabled:
        return [RoleMandate(role_name=Role.NONE) for _ in range(condition.committee_size)]
    mandates = [
        RoleMandate(role_name=role, mandate_text=ROLE_MANDATES[role])
        for role in condition.slot_roles()
    ]
    if condition.ablation_target is not None:
        mandates = apply_ablation(mandates, condition.ablation_target)
    return mandates


def apply_ablation(mandates: Sequence[RoleMandate], target: Role) -> List[RoleMandate]:
    """Blank the target role's mandate; the agent stays in the committee.

    Raises:
        ProtocolError: target is not one of the committee roles present
    """
    if target == Role.NONE or target not in {m.role_name for m in mandates}:
        raise ProtocolError(f"cannot ablate role {target.value}: not a committee role")
    return [
        m.model_copy(update={"mandate_text": ""}) if m.role_name == target else m
        for m in mandates
    ]


# ==================== Ballots and clerk ====================

def parse_ballot(text: str) -> Optional[Tuple[str, int]]:
    """Last JSON object in the reply carrying a valid decision and confidence."""
    for candidate in reversed(_JSON_OBJECT_RE.findall(text or "")):
        try:
            data = json.loads(candidate)
        except ValueError:
            continue
        if not isinstance(data, dict) or "decision" not in data:
            continue
        decision = data.get("decision")
        confidence = data.get("confidence")
        if decision not in OPTIONS:
            return None
        if isinstance(confidence, bool) or not isinstance(confidence, int):
            return None
        if not 0 <= confidence <= 100:
            return None
        return decision, confidence
    return None


def strict_majority_threshold(committee_size: int) -> int:
    return math.ceil((committee_size + 1) / 2)


def clerk_aggregate(ballots: Sequence[Ballot]) -> CommitteeDecision:
    """Plurality tally; ties go to the earliest option and never count as a strict majority."""
    if not ballots:
        raise ProtocolError("no ballots to aggregate")
    counts = Counter(b.decision for b in ballots)
    best = max(counts.values())
    decision = next(option for option in OPTIONS if counts.get(option, 0) == best)
    tied = sum(1 for option in OPTIONS if counts.get(option, 0) == best) > 1
    total = len(ballots)
    strict = not tied and best >= strict_majority_threshold(total)
    return CommitteeDecision(
        decision=decision, majority_count=best, total=total, strict_majority=strict
    )


def parse_clerk_reply(text: str, committee_size: int) -> Optional[CommitteeDecision]:
    """Decision object from an LLM clerk; None when it does not validate."""
    for candidate in reversed(_JSON_OBJECT_RE.findall(text or "")):
        try:
            data = json.loads(candidate)
        except ValueError:
            continue
        if not isinstance(data, dict) or data.get("decision") not in OPTIONS:
            continue
        count, total = data.get("majority_count"), data.get("total")
        if not isinstance(count, int) or not isinstance(total, int) or total != committee_size:
            return None
        if not 0 < count <= total:
            return None
        return CommitteeDecision(
            decision=data["decision"],
            majority_count=count,
            total=total,
            strict_majority=count >= strict_majority_threshold(total),
            source="agent",
        )
    return None


# ==================== Session ====================

class Session:
    """Mutable state of one deliberation in progress."""

    def __init__(
        self,
        condition: Condition,
        backends: Sequence[AgentBackend],
        seed: int,
        scenario_text: str,
        run_id: str,
        replicate_index: int = 0,
        agent_order: Optional[List[int]] = None,
        origin_seed: Optional[int] = None,
    ):
        n = condition.committee_size
        if len(backends) != n:
            raise ProtocolError(f"{len(backends)} backends for a committee of {n}")
        self.condition = condition
        self.backends = list(backends)
        self.seed = seed
        self.origin_seed = seed if origin_seed is None else origin_seed
        self.run_id = run_id
        self.replicate_index = replicate_index
        self.scenario_text = scenario_text
        self.mandates = build_mandates(condition)
        self.labels = condition.slot_labels()
        self.models = condition.agent_models or [b.descriptor for b in self.backends]
        if agent_order is None:
            agent_order = [int(i) for i in np.random.default_rng(seed).permutation(n)]
        self.agent_order = agent_order
        self.rngs = [np.random.default_rng([seed, i]) for i in range(n)]
        self.transcript: List[TurnRecord] = []
        self.state_table = StateTable(labels=self.labels)
        self.ballots: List[Ballot] = []
        self.clerk: Optional[CommitteeDecision] = None
        self.call_count = 0
        self.repair_count = 0
        self.exclusion_reason: Optional[ExclusionReason] = None
        self.exclusion_detail = ""
        self.started_at = datetime.now(timezone.utc)

    @property
    def excluded(self) -> bool:
        return self.exclusion_reason is not None

    def exclude(self, reason: ExclusionReason, detail: str) -> None:
        self.exclusion_reason = reason
        self.exclusion_detail = detail
        logger.warning(f"Run {self.run_id} excluded ({reason.value}): {detail}")

    def rounds_done(self) -> int:
        return len(self.transcript) // self.condition.committee_size

    def system_text_for(self, agent_index: int) -> str:
        return system_text(self.mandates[agent_index].mandate_text)

    def to_record(self) -> RunRecord:
        return RunRecord(
            run_id=self.run_id,
            condition=self.condition,
            seed=self.seed,
            replicate_index=self.replicate_index,
            agent_order=self.agent_order,
            agents=[
                AgentSlot(agent_index=i, role=m.role_name, label=label, model=model)
                for i, (m, label, model) in enumerate(zip(self.mandates, self.labels, self.models))
            ],
            turns=self.transcript,
            ballots=self.ballots,
            clerk=self.clerk,
            excluded=self.excluded,
            exclusion_reason=self.exclusion_reason,
            exclusion_detail=self.exclusion_detail,
            call_count=self.call_count,
            repair_count=self.repair_count,
            started_at=self.started_at,
            finished_at=datetime.now(timezone.utc),
        )

    async def call(self, agent_index: int, bundle: PromptBundle) -> Optional[str]:
        """One backend call; backend failures exclude the run and return None."""
        self.call_count += 1
        backend = self.backends[agent_index]
        try:
            return await backend.respond(
                bundle, self.condition.temperature, self.rngs[agent_index]
            )
        except BackendError as e:
            reason = _CAUSE_REASONS.get(e.cause, ExclusionReason.BACKEND_FAILURE)
            self.exclude(reason, f"{self.labels[agent_index]}: {e.cause}: {e}")
        except ScriptExhausted as e:
            self.exclude(ExclusionReason.BACKEND_FAILURE, f"{self.labels[agent_index]}: {e}")
        except Exception as e:
            logger.error(f"Backend {backend!r} raised {type(e).__name__}: {e}")
            self.exclude(
                ExclusionReason.BACKEND_FAILURE,
                f"{self.labels[agent_index]}: {type(e).__name__}: {e}",
            )
        return None


def _window(session: Session, k: int) -> List[str]:
    recent = session.transcript[-k:] if k > 0 else []
    return [f"[{session.labels[t.agent_index]}] {t.argument_text}" for t in recent]


def assemble_context(session: Session, agent_index: int, k: Optional[int] = None) -> PromptBundle:
    """Prompt for one turn: scenario, last k arguments and the rendered state table.

    Args:
        session: Session in progress
        agent_index: Committee slot about to speak
        k: Memory window; defaults to the condition's

    Returns:
        PromptBundle of kind "turn" (round and instruction are set by the caller)
    """
    k = session.condition.memory_window if k is None else k
    if k < 1:
        raise ProtocolError(f"memory window must be at least 1, got {k}")
    return PromptBundle(
        kind="turn",
        run_seed=session.seed,
        origin_seed=session.origin_seed,
        rounds=session.condition.rounds,
        agent_index=agent_index,
        role=session.mandates[agent_index].role_name,
        label=session.labels[agent_index],
        system_text=session.system_text_for(agent_index),
        scenario_text=session.scenario_text,
        window=_window(session, k),
        state_table_text=session.state_table.render(),
        state_table=session.state_table.known(),
    )


async def _take_turn(session: Session, agent_index: int, round_index: int) -> Optional[TurnRecord]:
    cond = session.condition
    bundle = assemble_context(session, agent_index).model_copy(
        update={"round": round_index, "instruction": turn_instruction(round_index, cond.rounds)}
    )
    logger.debug(
        f"{session.run_id} r{round_index} {session.labels[agent_index]}: "
        f"window={len(bundle.window)} known={len(bundle.state_table)}"
    )
    reply = await session.call(agent_index, bundle)
    if reply is None:
        return None

    outcome = parse_state_line(reply, tol=DEFAULT_TOLERANCE, strict=cond.strict_parse)
    turn = TurnRecord(
        round=round_index,
        agent_index=agent_index,
        role=session.mandates[agent_index].role_name,
        model=session.models[agent_index],
        argument_text=strip_state_lines(reply),
        reply_text=reply,
        parse=outcome,
        state=outcome.state,
    )
    session.transcript.append(turn)
    if not outcome.ok:
        logger.warning(
            f"{session.run_id} r{round_index} {session.labels[agent_index]}: "
            f"{outcome.failure_kind.value}, sending repair prompt"
        )
        session.repair_count += 1
        repair_bundle = bundle.model_copy(
            update={"kind": "repair", "previous_reply": reply, "followup": repair_prompt()}
        )
        repair_text = await session.call(agent_index, repair_bundle)
        if repair_text is None:
            return turn
        repaired = parse_state_line(repair_text, tol=DEFAULT_TOLERANCE, strict=cond.strict_parse)
        if repaired.ok:
            outcome = repaired.model_copy(update={"repaired": True})
        else:
            outcome = repaired
        turn = turn.model_copy(
            update={"repair_text": repair_text, "parse": outcome, "state": outcome.state}
        )
        session.transcript[-1] = turn

    if not outcome.ok:
        session.exclude(
            ExclusionReason.PARSE_FAILURE,
            f"{session.labels[agent_index]} round {round_index}: "
            f"{outcome.failure_kind.value}: {outcome.detail}",
        )
        return turn
    session.state_table.update(agent_index, outcome.state)
    return turn


async def execute_round(session: Session, round_index: int) -> List[TurnRecord]:
    """Call every agent once in the session's fixed order.

    Stops at the first exclusion; the partial transcript stays on the session.
    """
    if session.excluded:
        return []
    turns = []
    for agent_index in session.agent_order:
        turn = await _take_turn(session, agent_index, round_index)
        if turn is not None:
            turns.append(turn)
        if session.excluded:
            break
    return turns


def _ballot_bundle(session: Session, agent_index: int) -> PromptBundle:
    return assemble_context(session, agent_index).model_copy(
        update={"kind": "ballot", "round": session.condition.rounds + 1, "instruction": BALLOT_PROMPT}
    )


async def collect_ballots(session: Session) -> List[Ballot]:
    """One private ballot call per agent, in slot order, with one repair each."""
    if session.excluded:
        return []
    ballots = []
    for agent_index in range(session.condition.committee_size):
        bundle = _ballot_bundle(session, agent_index)
        reply = await session.call(agent_index, bundle)
        if reply is None:
            return []
        parsed = parse_ballot(reply)
        if parsed is None:
            logger.warning(f"{session.run_id}: invalid ballot from {session.labels[agent_index]}")
            session.repair_count += 1
            repair = bundle.model_copy(
                update={
                    "kind": "ballot_repair",
                    "previous_reply": reply,
                    "followup": BALLOT_REPAIR_PROMPT,
                }
            )
            reply = await session.call(agent_index, repair)
            if reply is None:
                return []
            parsed = parse_ballot(reply)
        if parsed is None:
            session.exclude(
                ExclusionReason.BALLOT_FAILURE,
                f"{session.labels[agent_index]}: unparsable ballot {reply[:80]!r}",
            )
            return []
        decision, confidence = parsed
        ballots.append(Ballot(agent_index=agent_index, decision=decision, confidence=confidence))
    session.ballots = ballots
    return ballots


async def _decide(session: Session, clerk_backend: Optional[AgentBackend]) -> CommitteeDecision:
    tally = clerk_aggregate(session.ballots)
    if session.condition.clerk_mode != "agent" or clerk_backend is None:
        return tally
    bundle = PromptBundle(
        kind="clerk",
        run_seed=session.seed,
        round=session.condition.rounds + 1,
        rounds=session.condition.rounds,
        instruction=clerk_prompt(session.ballots),
    )
    session.call_count += 1
    try:
        reply = await clerk_backend.respond(
            bundle, session.condition.temperature, np.random.default_rng([session.seed, 1 << 16])
        )
    except Exception as e:
        logger.warning(f"{session.run_id}: clerk call failed ({e}); using the tally")
        return tally
    decision = parse_clerk_reply(reply, session.condition.committee_size)
    if decision is None:
        logger.warning(f"{session.run_id}: clerk reply is not valid JSON; using the tally")
        return tally
    if decision.decision != tally.decision:
        logger.warning(
            f"{session.run_id}: clerk decided {decision.decision}, tally says {tally.decision}"
        )
    return decision


async def _finish(session: Session, clerk_backend: Optional[AgentBackend]) -> RunRecord:
    for round_index in range(session.rounds_done() + 1, session.condition.rounds + 1):
        await execute_round(session, round_index)
        if session.excluded:
            break
    if not session.excluded:
        await collect_ballots(session)
    if not session.excluded:
        session.clerk = await _decide(session, clerk_backend)
    record = session.to_record()
    logger.info(
        f"Run {record.run_id} finished: "
        f"{'excluded ' + record.exclusion_reason.value if record.excluded else record.clerk.decision} "
        f"({record.call_count} calls, {record.repair_count} repairs)"
    )
    return record


def default_run_id(condition: Condition, seed: int) -> str:
    return f"{condition.key}-{seed:016x}"


def scenario_text_for(condition: Condition, scenario: Optional[ScenarioPacket]) -> str:
    if scenario is None:
        return f"Scenario {condition.scenario_id}"
    return scenario.render(condition.variant)


async def run_deliberation(
    condition: Condition,
    backends: Sequence[AgentBackend],
    seed: int,
    scenario: Optional[ScenarioPacket] = None,
    run_id: Optional[str] = None,
    replicate_index: int = 0,
    clerk_backend: Optional[AgentBackend] = None,
) -> RunRecord:
    """Run one replicate end to end: rounds, ballots, clerk.

    Args:
        condition: Experimental cell
        backends: One backend per committee slot
        seed: 64-bit run seed; fixes the agent order and every rng stream
        scenario: Scenario packet; a placeholder text is used when omitted
        run_id: Record identifier; derived from key and seed when omitted
        replicate_index: Index recorded in the run record
        clerk_backend: LLM clerk, used when condition.clerk_mode is "agent"

    Returns:
        RunRecord, excluded when a backend, parse or ballot failure occurred
    """
    session = Session(
        condition,
        backends,
        seed,
        scenario_text_for(condition, scenario),
        run_id or default_run_id(condition, seed),
        replicate_index=replicate_index,
    )
    logger.info(f"Starting run {session.run_id} (order {session.agent_order})")
    return await _finish(session, clerk_backend)


async def continue_deliberation(
    base_run: RunRecord,
    backends: Sequence[AgentBackend],
    branch_round: int,
    seed: int,
    branch_index: int,
    scenario: Optional[ScenarioPacket] = None,
    clerk_backend: Optional[AgentBackend] = None,
) -> RunRecord:
    """Rebuild the session at the end of `branch_round` and run the remaining rounds.

    The transcript prefix is replayed verbatim from the base run; the agent
    order is kept and every rng stream is reseeded from `seed`. Prompts carry
    the base run's seed as `origin_seed`.

    Raises:
        ProtocolError: excluded base run or branch round outside 1..rounds-1
    """
    cond = base_run.condition
    if base_run.excluded:
        raise ProtocolError(f"cannot branch from excluded run {base_run.run_id}")
    if not 1 <= branch_round < cond.rounds:
        raise ProtocolError(f"branch round {branch_round} outside 1..{cond.rounds - 1}")

    session = Session(
        cond,
        backends,
        seed,
        scenario_text_for(cond, scenario),
        f"{base_run.run_id}-b{branch_round}-{branch_index:03d}",
        replicate_index=base_run.replicate_index,
        agent_order=list(base_run.agent_order),
        origin_seed=base_run.seed,
    )
    session.models = [slot.model for slot in base_run.agents]
    for turn in base_run.turns:
        if turn.round > branch_round:
            break
        session.transcript.append(turn)
        if turn.state is not None:
            session.state_table.update(turn.agent_index, turn.state)

    record = await _finish(session, clerk_backend)
    return record.model_copy(
        update={
            "base_run_id": base_run.run_id,
            "branch_index": branch_index,
            "branch_round": branch_round,
        }
    )
