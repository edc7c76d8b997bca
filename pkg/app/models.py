"""Pydantic models for deliberation records, conditions and analysis results."""
from datetime import datetime
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

SCHEMA_VERSION = 1
OPTIONS = ("A", "B", "C")
SIMPLEX_TOL = 1e-9
DEFAULT_MEMORY_WINDOW = 15


class Role(str, Enum):
    """Committee role. NONE marks agents deliberating without a mandate."""
    CHAIR = "Chair"
    WELFARE = "Welfare"
    RIGHTS = "Rights"
    EQUITY = "Equity"
    SECURITY = "Security"
    NONE = "None"


COMMITTEE_ROLES = [Role.CHAIR, Role.WELFARE, Role.RIGHTS, Role.EQUITY, Role.SECURITY]


class FailureKind(str, Enum):
    NONE = "none"
    NO_STATE_LINE = "no_state_line"
    MALFORMED_NUMBERS = "malformed_numbers"
    SIMPLEX_VIOLATION = "simplex_violation"
    TAG_VIOLATION = "tag_violation"


class ExclusionReason(str, Enum):
    PARSE_FAILURE = "parse_failure"
    BALLOT_FAILURE = "ballot_failure"
    BACKEND_TIMEOUT = "backend_timeout"
    BACKEND_RATE_LIMIT = "backend_rate_limit"
    BACKEND_SERVER_ERROR = "backend_server_error"
    BACKEND_FAILURE = "backend_failure"
    INTERRUPTED = "interrupted"


class Composition(str, Enum):
    UNIFORM = "uniform"
    MIXED = "mixed"


# ==================== Codec ====================

class PreferenceState(BaseModel):
    """One agent's parsed round output."""
    pref: Tuple[float, float, float]
    conf: int = Field(ge=0, le=100)
    tags: List[str]

    @field_validator("pref")
    @classmethod
    def _on_simplex(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(p < 0.0 or p > 1.0 for p in v):
            raise ValueError(f"preference components must lie in [0, 1]: {v}")
        if abs(sum(v) - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"preferences must sum to 1: {v}")
        return v

    @field_validator("tags")
    @classmethod
    def _two_tags(cls, v: List[str]) -> List[str]:
        if len(v) != 2:
            raise ValueError(f"exactly 2 tags required, got {len(v)}")
        for tag in v:
            if not tag or any(ch in tag for ch in '",[]\n'):
                raise ValueError(f"invalid tag: {tag!r}")
        return v

    @property
    def top_option(self) -> str:
        """Argmax option; ties resolve to the earlier option (A < B < C)."""
        best = max(self.pref)
        return OPTIONS[self.pref.index(best)]

    @property
    def top_is_tied(self) -> bool:
        return self.pref.count(max(self.pref)) > 1


class ParseOutcome(BaseModel):
    """Result of parsing one agent reply."""
    state: Optional[PreferenceState] = None
    failure_kind: FailureKind = FailureKind.NONE
    repaired: bool = False
    detail: str = ""

    @model_validator(mode="after")
    def _state_iff_success(self) -> "ParseOutcome":
        if (self.state is None) == (self.failure_kind == FailureKind.NONE):
            raise ValueError("state must be present exactly when failure_kind is none")
        return self

    @property
    def ok(self) -> bool:
        return self.failure_kind == FailureKind.NONE


# ==================== Protocol ====================

class RoleMandate(BaseModel):
    """Mandate carried by one committee slot; empty text under ablation or no-roles."""
    role_name: Role
    mandate_text: str = ""


class Condition(BaseModel):
    """One experimental cell."""
    scenario_id: str
    temperature: float = Field(default=0.0, ge=0.0)
    committee_size: int = Field(default=5, ge=2)
    roles_enabled: bool = False
    composition: Composition = Composition.UNIFORM
    agent_models: List[str] = Field(default_factory=list)
    memory_window: int = Field(default=DEFAULT_MEMORY_WINDOW, ge=1)
    ablation_target: Optional[Role] = None
    rounds: int = Field(default=20, ge=2)
    target_replicates: int = Field(default=20, ge=1)
    variant: Optional[str] = None
    strict_parse: bool = False
    clerk_mode: Literal["tally", "agent"] = "tally"
    clerk_model: Optional[str] = None

    @model_validator(mode="after")
    def _check_invariants(self) -> "Condition":
        if self.ablation_target is not None:
            if not self.roles_enabled:
                raise ValueError("ablation_target requires roles_enabled")
            if self.ablation_target == Role.NONE:
                raise ValueError("cannot ablate the empty role")
        if self.roles_enabled and self.committee_size != len(COMMITTEE_ROLES):
            raise ValueError(f"roles require a committee of {len(COMMITTEE_ROLES)} agents")
        if len(self.agent_models) == 1:
            self.agent_models = self.agent_models * self.committee_size
        if self.agent_models and len(self.agent_models) != self.committee_size:
            raise ValueError(
                f"agent_models has {len(self.agent_models)} entries for N={self.committee_size}"
            )
        if self.clerk_mode == "agent" and not self.clerk_model:
            raise ValueError("clerk_mode 'agent' needs clerk_model")
        return self

    @property
    def key(self) -> str:
        """Condition key; also the run file stem."""
        parts = [
            self.scenario_id,
            f"T{repr(float(self.temperature))}",
            f"N{self.committee_size}",
            f"roles{self.roles_enabled}",
        ]
        if self.composition == Composition.MIXED:
            parts.append("multimodel")
        if self.ablation_target is not None:
            parts.append(f"ablate-{self.ablation_target.value}")
        if self.memory_window != DEFAULT_MEMORY_WINDOW:
            parts.append(f"k{self.memory_window}")
        if self.variant:
            parts.append(f"variant-{self.variant}")
        return "__".join(parts)

    @property
    def pooled_key(self) -> str:
        """Key with the variant suffix removed."""
        return self.model_copy(update={"variant": None}).key

    def slot_roles(self) -> List[Role]:
        if self.roles_enabled:
            return list(COMMITTEE_ROLES)
        return [Role.NONE] * self.committee_size

    def slot_labels(self) -> List[str]:
        if self.roles_enabled:
            return [role.value for role in COMMITTEE_ROLES]
        return [f"Agent {i + 1}" for i in range(self.committee_size)]


class Ballot(BaseModel):
    agent_index: int
    decision: Literal["A", "B", "C"]
    confidence: int = Field(ge=0, le=100)


class CommitteeDecision(BaseModel):
    decision: Literal["A", "B", "C"]
    majority_count: int
    total: int
    strict_majority: bool
    source: Literal["tally", "agent"] = "tally"


class TurnRecord(BaseModel):
    round: int = Field(ge=1)
    agent_index: int
    role: Role
    model: str = ""
    argument_text: str = ""
    reply_text: str = ""
    repair_text: Optional[str] = None
    parse: ParseOutcome
    state: Optional[PreferenceState] = None

    @model_validator(mode="after")
    def _state_iff_parsed(self) -> "TurnRecord":
        if (self.state is None) == self.parse.ok:
            raise ValueError("turn state must be present exactly when parsing succeeded")
        return self


class AgentSlot(BaseModel):
    agent_index: int
    role: Role
    label: str
    model: str


class RunRecord(BaseModel):
    """One replicate, complete and self-describing."""
    schema_version: int = SCHEMA_VERSION
    run_id: str
    condition: Condition
    seed: int
    replicate_index: int = 0
    agent_order: List[int]
    agents: List[AgentSlot]
    turns: List[TurnRecord] = Field(default_factory=list)
    ballots: List[Ballot] = Field(default_factory=list)
    clerk: Optional[CommitteeDecision] = None
    excluded: bool = False
    exclusion_reason: Optional[ExclusionReason] = None
    exclusion_detail: str = ""
    call_count: int = 0
    repair_count: int = 0
    base_run_id: Optional[str] = None
    branch_index: Optional[int] = None
    branch_round: Optional[int] = None
    started_at: Optional[datetime] = None
    finished_at: Optional[datetime] = None

    @model_validator(mode="after")
    def _check_counts(self) -> "RunRecord":
        if self.excluded:
            if self.exclusion_reason is None:
                raise ValueError("excluded runs need an exclusion_reason")
            return self
        n = self.condition.committee_size
        if len(self.turns) != self.condition.rounds * n:
            raise ValueError(f"expected {self.condition.rounds * n} turns, got {len(self.turns)}")
        if len(self.ballots) != n:
            raise ValueError(f"expected {n} ballots, got {len(self.ballots)}")
        if self.clerk is None or self.clerk.total != n:
            raise ValueError("clerk decision must cover the whole committee")
        return self

    @property
    def is_continuation(self) -> bool:
        return self.base_run_id is not None


class StateTable(BaseModel):
    """Last known parsed state per committee slot."""
    labels: List[str]
    entries: List[Optional[PreferenceState]] = Field(default_factory=list)

    @model_validator(mode="after")
    def _pad_entries(self) -> "StateTable":
        if not self.entries:
            self.entries = [None] * len(self.labels)
        return self

    def update(self, agent_index: int, state: PreferenceState) -> None:
        self.entries[agent_index] = state

    def known(self) -> Dict[int, PreferenceState]:
        return {i: s for i, s in enumerate(self.entries) if s is not None}

    def render(self) -> str:
        """Render as a pipe table: role, p_A, p_B, p_C, conf, tags; unknown rows as dashes."""
        lines = ["role | p_A | p_B | p_C | conf | tags"]
        for label, state in zip(self.labels, self.entries):
            if state is None:
                lines.append(f"{label} | — | — | — | — | —")
            else:
                a, b, c = state.pref
                lines.append(
                    f"{label} | {a:.3f} | {b:.3f} | {c:.3f} | {state.conf} | {', '.join(state.tags)}"
                )
        return "\n".join(lines)


class PromptBundle(BaseModel):
    """Everything one backend call needs."""
    kind: Literal["turn", "repair", "ballot", "ballot_repair", "clerk"] = "turn"
    run_seed: int = 0
    origin_seed: Optional[int] = None
    round: int = 0
    rounds: int = 0
    agent_index: int = 0
    role: Role = Role.NONE
    label: str = ""
    system_text: str = ""
    scenario_text: str = ""
    window: List[str] = Field(default_factory=list)
    state_table_text: str = ""
    state_table: Dict[int, PreferenceState] = Field(default_factory=dict)
    instruction: str = ""
    previous_reply: Optional[str] = None
    followup: Optional[str] = None

    def user_text(self) -> str:
        sections = []
        if self.scenario_text:
            sections.append(f"SCENARIO:\n{self.scenario_text}")
        if self.window:
            sections.append("RECENT ARGUMENTS:\n" + "\n".join(self.window))
        if self.state_table_text:
            sections.append(f"COMMITTEE STATE TABLE:\n{self.state_table_text}")
        if self.instruction:
            sections.append(self.instruction)
        return "\n\n".join(sections)

    def messages(self) -> List[Dict[str, str]]:
        msgs = []
        if self.system_text:
            msgs.append({"role": "system", "content": self.system_text})
        msgs.append({"role": "user", "content": self.user_text()})
        if self.previous_reply is not None and self.followup:
            msgs.append({"role": "assistant", "content": self.previous_reply})
            msgs.append({"role": "user", "content": self.followup})
        return msgs


# ==================== Analysis ====================

class CommitteeTrajectory(BaseModel):
    """Per-round committee mean preference for one replicate."""
    run_id: str = ""
    rounds: List[int]
    means: List[Tuple[float, float, float]]

    @model_validator(mode="after")
    def _check(self) -> "CommitteeTrajectory":
        if len(self.rounds) != len(self.means):
            raise ValueError("rounds and means differ in length")
        for t, mean in zip(self.rounds, self.means):
            if abs(sum(mean) - 1.0) > SIMPLEX_TOL:
                raise ValueError(f"committee mean off the simplex at round {t}: {mean}")
        return self


class DivergenceSeries(BaseModel):
    rounds: List[int]
    values: List[float]
    replicates: int

    def at(self, t: int) -> float:
        return self.values[self.rounds.index(t)]


class LyapunovEstimate(BaseModel):
    slope: float
    intercept: float
    fit_window: Tuple[int, int]
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    bootstrap_resamples: int = 0
    permutation_p: Optional[float] = None
    permutation_count: int = 0

    @model_validator(mode="after")
    def _check(self) -> "LyapunovEstimate":
        if self.ci_low is not None and self.ci_high is not None:
            if not self.ci_low <= self.slope <= self.ci_high:
                raise ValueError("confidence interval must contain the estimate")
        if self.permutation_p is not None and not 0.0 < self.permutation_p <= 1.0:
            raise ValueError("permutation p-value must lie in (0, 1]")
        return self


class BranchingCertificate(BaseModel):
    base_run_id: str = ""
    branch_round: int
    continuations: int
    gamma: float
    h_k: float
    mu_d: float
    c_in: float
    c_out: Optional[float] = None


class GroupMetrics(BaseModel):
    flip_rate: float = Field(ge=0.0, le=1.0)
    modal_decision: str
    modal_tie: bool = False
    ttm: List[Optional[int]]
    switch_counts: List[List[int]]


# ==================== Store / runner ====================

class ScenarioPacket(BaseModel):
    id: str
    domain: str
    type: Literal["choice_ABC", "allocation"]
    options: List[str]
    question: str
    text: str = ""
    variants: Dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_options(self) -> "ScenarioPacket":
        if self.type == "choice_ABC" and len(self.options) != 3:
            raise ValueError(f"{self.id}: choice_ABC packets need exactly three options")
        if not self.options:
            raise ValueError(f"{self.id}: options are required")
        return self

    def render(self, variant: Optional[str] = None) -> str:
        """Scenario packet text shown to agents."""
        body = self.variants[variant] if variant else self.text
        labels = OPTIONS if self.type == "choice_ABC" else [str(i + 1) for i in range(len(self.options))]
        options = "\n".join(f"Option {label}: {name}" for label, name in zip(labels, self.options))
        return f"[{self.id}] {self.domain}\n{body}\n\nDecision question: {self.question}\n{options}"


class AccountingRow(BaseModel):
    group: str = "Core"
    condition: str
    target: int
    realized: int = Field(ge=0)
    deficit: int

    @model_validator(mode="after")
    def _deficit(self) -> "AccountingRow":
        if self.deficit != self.target - self.realized:
            raise ValueError("deficit must equal target - realized")
        return self


class ConditionJob(BaseModel):
    condition: Condition
    replicate_index: int
    seed: int
    run_id: str


class RunSummary(BaseModel):
    attempted: int = 0
    completed: int = 0
    skipped: int = 0
    excluded: Dict[str, int] = Field(default_factory=dict)
    wall_time_s: float = 0.0

    @property
    def excluded_total(self) -> int:
        return sum(self.excluded.values())
