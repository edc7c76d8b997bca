"""Condition-matrix expansion, replicate scheduling and branching experiments."""
import asyncio
import hashlib
import itertools
import logging
import time
from collections import Counter, defaultdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Set

import numpy as np
from pydantic import ValidationError

from agent.registry import BackendRegistry
from app.config import MatrixConfig
from app.exceptions import BackendError, ConfigError, ProtocolError, StoreError
from app.models import (
    AgentSlot,
    Composition,
    Condition,
    ConditionJob,
    ExclusionReason,
    RunRecord,
    RunSummary,
    ScenarioPacket,
)
from app.protocol import build_mandates, continue_deliberation, run_deliberation
from app.store import RunFile, load_runs

logger = logging.getLogger(__name__)


def derive_seed(master_seed: int, key: str, index: int) -> int:
    """Stable 64-bit seed from (master seed, canonical key, index)."""
    digest = hashlib.blake2b(f"{master_seed}|{key}|{index}".encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "big")


def make_job(condition: Condition, replicate_index: int, master_seed: int) -> ConditionJob:
    return ConditionJob(
        condition=condition,
        replicate_index=replicate_index,
        seed=derive_seed(master_seed, condition.key, replicate_index),
        run_id=f"{condition.key}-r{replicate_index:03d}",
    )


def expand_conditions(cfg: MatrixConfig) -> List[Condition]:
    """Cartesian product of the configured axes; ablation only crosses roles-on cells.

    Raises:
        ConfigError: a combination violates Condition invariants
    """
    conditions = []
    axes = itertools.product(
        cfg.scenarios, cfg.temperatures, cfg.roles, cfg.compositions,
        cfg.memory_windows, cfg.ablation_targets, cfg.scenario_variants,
    )
    for scenario, temp, roles, composition, k, ablate, variant in axes:
        if ablate is not None and not roles:
            continue
        try:
            conditions.append(
                Condition(
                    scenario_id=scenario,
                    temperature=temp,
                    committee_size=cfg.committee_size,
                    roles_enabled=roles,
                    composition=Composition(composition),
                    agent_models=cfg.lineup(composition),
                    memory_window=k,
                    ablation_target=ablate,
                    rounds=cfg.rounds,
                    target_replicates=cfg.target_replicates,
                    variant=variant,
                    strict_parse=cfg.strict_parse,
                    clerk_mode=cfg.clerk_mode,
                    clerk_model=cfg.clerk_model,
                )
            )
        except ValidationError as e:
            raise ConfigError(f"invalid condition for {scenario}: {e}")
    return conditions


def expand_matrix(cfg: MatrixConfig) -> List[ConditionJob]:
    """Every condition crossed with replicate indices 0..target-1, in a fixed order."""
    jobs = [
        make_job(condition, idx, cfg.master_seed)
        for condition in expand_conditions(cfg)
        for idx in range(cfg.target_replicates)
    ]
    logger.info(f"Expanded matrix into {len(jobs)} jobs")
    return jobs


def backfill_jobs(
    jobs: List[ConditionJob], existing: Iterable[RunRecord], master_seed: int
) -> List[ConditionJob]:
    """Append replicate indices beyond the used range to cover excluded runs."""
    done: Dict[str, List[RunRecord]] = defaultdict(list)
    for record in existing:
        if not record.is_continuation:
            done[record.condition.key].append(record)
    done_ids = {r.run_id for runs in done.values() for r in runs}

    by_condition: Dict[str, List[ConditionJob]] = defaultdict(list)
    for job in jobs:
        by_condition[job.condition.key].append(job)

    extra = []
    for key, cond_jobs in by_condition.items():
        condition = cond_jobs[0].condition
        realized = sum(1 for r in done[key] if not r.excluded)
        pending = sum(1 for j in cond_jobs if j.run_id not in done_ids)
        missing = condition.target_replicates - realized - pending
        used = [j.replicate_index for j in cond_jobs] + [r.replicate_index for r in done[key]]
        next_index = max(used) + 1
        for offset in range(max(missing, 0)):
            extra.append(make_job(condition, next_index + offset, master_seed))
        if missing > 0:
            logger.info(f"Backfilling {missing} replicates for {key}")
    return jobs + extra


def failed_record(job: ConditionJob, reason: ExclusionReason, detail: str) -> RunRecord:
    """Excluded record for a job that never produced a session."""
    condition = job.condition
    n = condition.committee_size
    now = datetime.now(timezone.utc)
    mandates = build_mandates(condition)
    models = condition.agent_models or [""] * n
    return RunRecord(
        run_id=job.run_id,
        condition=condition,
        seed=job.seed,
        replicate_index=job.replicate_index,
        agent_order=[int(i) for i in np.random.default_rng(job.seed).permutation(n)],
        agents=[
            AgentSlot(agent_index=i, role=m.role_name, label=label, model=model)
            for i, (m, label, model) in enumerate(zip(mandates, condition.slot_labels(), models))
        ],
        excluded=True,
        exclusion_reason=reason,
        exclusion_detail=detail,
        started_at=now,
        finished_at=now,
    )


class JobRunner:
    """Runs condition jobs concurrently and persists every outcome immediately."""

    def __init__(
        self,
        registry: BackendRegistry,
        output_dir: Path,
        scenarios: Optional[Dict[str, ScenarioPacket]] = None,
        parallelism: int = 4,
    ):
        """Initialize the runner.

        Args:
            registry: Resolves lineup model names to backends
            output_dir: Directory holding one JSONL file per condition
            scenarios: Scenario packets by id
            parallelism: Maximum concurrent deliberations
        """
        if parallelism < 1:
            raise ConfigError("parallelism must be at least 1")
        self.registry = registry
        self.output_dir = Path(output_dir)
        self.scenarios = scenarios or {}
        self.parallelism = parallelism

    def existing_run_ids(self, jobs: Iterable[ConditionJob]) -> Set[str]:
        seen: Set[str] = set()
        for key in {job.condition.key for job in jobs}:
            path = self.output_dir / f"{key}.jsonl"
            if path.exists():
                seen.update(r.run_id for r in load_runs(str(path), strict=False))
        return seen

    async def _run_job(self, job: ConditionJob) -> RunRecord:
        condition = job.condition
        run_file = RunFile(self.output_dir, condition)
        try:
            backends = self.registry.resolve_lineup(condition.agent_models)
            clerk = None
            if condition.clerk_mode == "agent":
                clerk = self.registry.resolve(condition.clerk_model)
        except BackendError as e:
            logger.error(f"Cannot resolve backends for {job.run_id}: {e}")
            record = failed_record(job, ExclusionReason.BACKEND_FAILURE, f"{e.cause}: {e}")
            run_file.append(record)
            return record

        try:
            record = await run_deliberation(
                condition,
                backends,
                job.seed,
                scenario=self.scenarios.get(condition.scenario_id),
                run_id=job.run_id,
                replicate_index=job.replicate_index,
                clerk_backend=clerk,
            )
        except asyncio.CancelledError:
            record = failed_record(job, ExclusionReason.INTERRUPTED, "interrupted before completion")
            run_file.append(record)
            logger.warning(f"Run {job.run_id} interrupted")
            raise
        except Exception as e:
            logger.error(f"Run {job.run_id} failed with {type(e).__name__}: {e}")
            record = failed_record(job, ExclusionReason.BACKEND_FAILURE, f"{type(e).__name__}: {e}")
        run_file.append(record)
        return record

    async def execute(self, jobs: List[ConditionJob]) -> RunSummary:
        """Run the jobs not yet persisted, at most `parallelism` at a time.

        A job that cannot be persisted does not stop the others; the first such
        StoreError is raised once every job has finished.
        """
        started = time.monotonic()
        existing = self.existing_run_ids(jobs)
        pending = [job for job in jobs if job.run_id not in existing]
        skipped = len(jobs) - len(pending)
        if skipped:
            logger.info(f"Skipping {skipped} runs already on disk")

        semaphore = asyncio.Semaphore(self.parallelism)

        async def limited(job: ConditionJob) -> RunRecord:
            async with semaphore:
                return await self._run_job(job)

        outcomes = await asyncio.gather(*(limited(job) for job in pending), return_exceptions=True)
        records: List[RunRecord] = []
        failures: List[StoreError] = []
        for job, outcome in zip(pending, outcomes):
            if isinstance(outcome, RunRecord):
                records.append(outcome)
            elif isinstance(outcome, StoreError):
                logger.error(f"Run {job.run_id} was not persisted: {outcome}")
                failures.append(outcome)
            else:
                raise outcome
        excluded = Counter(r.exclusion_reason.value for r in records if r.excluded)
        summary = RunSummary(
            attempted=len(pending),
            completed=sum(1 for r in records if not r.excluded),
            skipped=skipped,
            excluded=dict(sorted(excluded.items())),
            wall_time_s=time.monotonic() - started,
        )
        logger.info(
            f"Executed {summary.attempted} runs: {summary.completed} completed, "
            f"{summary.excluded_total} excluded, {summary.skipped} skipped"
        )
        if failures:
            raise StoreError(f"{len(failures)} of {len(pending)} runs were not persisted: {failures[0]}")
        return summary


async def execute_jobs(
    jobs: List[ConditionJob],
    registry: BackendRegistry,
    output_dir: Path,
    parallelism: int = 4,
    scenarios: Optional[Dict[str, ScenarioPacket]] = None,
) -> RunSummary:
    runner = JobRunner(registry, output_dir, scenarios=scenarios, parallelism=parallelism)
    try:
        return await runner.execute(jobs)
    finally:
        await registry.aclose()


async def run_branching(
    base_run: RunRecord,
    branch_round: int,
    continuations: int,
    registry: BackendRegistry,
    master_seed: int = 0,
    scenario: Optional[ScenarioPacket] = None,
    parallelism: int = 4,
) -> List[RunRecord]:
    """K continuations from the state of `base_run` at the end of `branch_round`.

    Raises:
        ProtocolError: excluded base run or branch round not before the last round
        BackendError: a lineup backend cannot be resolved
    """
    cond = base_run.condition
    if base_run.excluded:
        raise ProtocolError(f"cannot branch from excluded run {base_run.run_id}")
    if branch_round >= cond.rounds or branch_round < 1:
        raise ProtocolError(f"branch round {branch_round} must lie in 1..{cond.rounds - 1}")
    if continuations < 1:
        raise ProtocolError("need at least one continuation")

    models = [slot.model for slot in base_run.agents]
    semaphore = asyncio.Semaphore(parallelism)
    clerk_model = cond.clerk_model if cond.clerk_mode == "agent" else None

    async def one(branch_index: int) -> RunRecord:
        async with semaphore:
            backends = registry.resolve_lineup(models)
            clerk = registry.resolve(clerk_model) if clerk_model else None
            seed = derive_seed(master_seed, f"{base_run.run_id}|branch{branch_round}", branch_index)
            return await continue_deliberation(
                base_run, backends, branch_round, seed, branch_index,
                scenario=scenario, clerk_backend=clerk,
            )

    records = await asyncio.gather(*(one(k) for k in range(continuations)))
    logger.info(
        f"Branched {base_run.run_id} at round {branch_round}: "
        f"{sum(1 for r in records if not r.excluded)}/{continuations} continuations completed"
    )
    return list(records)
