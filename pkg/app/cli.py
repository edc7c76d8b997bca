"""Command-line surface: run, branch, analyze, landscape, accounting, export, validate.

Exit codes: 0 success (possibly with deficits), 1 usage or configuration
error, 2 I/O error, 3 analysis degenerate.
"""
import argparse
import asyncio
import csv
import json
import logging
import math
import sys
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import yaml

from app import analysis
from app.config import DEFAULTS, build_registry, load_endpoints, load_matrix_config
from app.exceptions import (
    AnalysisError,
    BackendError,
    ConfigError,
    DegenerateEnsemble,
    ProtocolError,
    StoreError,
)
from app.models import RunRecord, ScenarioPacket
from app.runner import backfill_jobs, derive_seed, execute_jobs, expand_matrix, run_branching
from app.store import RunFile, load_runs, load_scenarios, run_accounting

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_DEGENERATE = 3


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with the configuration code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def parse_window(text: str) -> Optional[Tuple[int, int]]:
    """Parse lo:hi, or "auto" (None) for the pre-saturation window."""
    if text == "auto":
        return None
    try:
        lo, hi = (int(part) for part in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must look like 3:20, got {text!r}")
    if lo < 1 or hi <= lo:
        raise argparse.ArgumentTypeError(f"window needs 1 <= lo < hi, got {text!r}")
    return lo, hi


def _fmt(value):
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return "" if value is None else value


def write_csv(path: Path, rows: Sequence[Dict], fieldnames: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fieldnames})
    logger.info(f"Wrote {len(rows)} rows to {path}")


def write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote {path}")


def _load(args) -> List[RunRecord]:
    diagnostics: List[str] = []
    records = load_runs(args.inputs, strict=not args.lenient, diagnostics=diagnostics)
    if diagnostics:
        print(f"{len(diagnostics)} malformed lines skipped", file=sys.stderr)
    return records


def _groups(records: Iterable[RunRecord], pool_variants: bool = False) -> Dict[str, List[RunRecord]]:
    groups: Dict[str, List[RunRecord]] = defaultdict(list)
    for record in records:
        if record.is_continuation:
            continue
        key = record.condition.pooled_key if pool_variants else record.condition.key
        groups[key].append(record)
    return dict(sorted(groups.items()))


def _scenario_index(packets: Sequence[ScenarioPacket]) -> Dict[str, ScenarioPacket]:
    return {p.id: p for p in packets}


# ==================== run ====================

def cmd_run(args) -> int:
    """Expand the matrix, execute pending jobs and report deficits."""
    cfg = load_matrix_config(args.config)
    updates = {}
    if args.out:
        updates["output_dir"] = args.out
    if args.parallelism:
        updates["parallelism"] = args.parallelism
    if args.strict_parse:
        updates["strict_parse"] = True
    if args.seed is not None:
        updates["master_seed"] = args.seed
    cfg = cfg.model_copy(update=updates)

    base = Path(args.config).resolve().parent
    scenarios = _scenario_index(load_scenarios(cfg.scenarios_path(base)))
    for scenario_id in cfg.scenarios:
        if scenario_id not in scenarios:
            raise ConfigError(f"unknown scenario {scenario_id}")
        for variant in cfg.scenario_variants:
            if variant and variant not in scenarios[scenario_id].variants:
                raise ConfigError(f"scenario {scenario_id} has no variant {variant}")

    output_dir = Path(cfg.output_dir)
    jobs = expand_matrix(cfg)
    keys = sorted({job.condition.key for job in jobs})
    if args.backfill:
        existing = _existing(output_dir, keys)
        jobs = backfill_jobs(jobs, existing, cfg.master_seed)

    registry = build_registry(cfg, base)
    summary = asyncio.run(
        execute_jobs(jobs, registry, output_dir, parallelism=cfg.parallelism, scenarios=scenarios)
    )
    if summary.attempted == 0:
        print("0 new runs")
    print(json.dumps(summary.model_dump(), indent=2, sort_keys=True))

    rows = run_accounting(_existing(output_dir, keys), default_target=cfg.target_replicates)
    for row in rows:
        if row.deficit > 0:
            logger.warning(f"{row.condition}: realized {row.realized} of {row.target}")
            print(f"deficit {row.deficit}: {row.condition}", file=sys.stderr)
    return EXIT_OK


def _existing(output_dir: Path, keys: Sequence[str]) -> List[RunRecord]:
    records: List[RunRecord] = []
    for key in keys:
        path = output_dir / f"{key}.jsonl"
        if path.exists():
            records.extend(load_runs(str(path), strict=False))
    return records


# ==================== branch ====================

def cmd_branch(args) -> int:
    """Continue persisted base runs from a branch round."""
    cfg = load_matrix_config(args.config)
    base = Path(args.config).resolve().parent
    scenarios = _scenario_index(load_scenarios(cfg.scenarios_path(base)))
    records = [r for r in _load(args) if not r.is_continuation]
    if args.base_run:
        wanted = set(args.base_run)
        bases = [r for r in records if r.run_id in wanted]
        missing = wanted - {r.run_id for r in bases}
        if missing:
            raise ConfigError(f"base runs not found: {sorted(missing)}")
    else:
        bases = sorted((r for r in records if not r.excluded), key=lambda r: r.run_id)[: args.bases]
    if not bases:
        raise ConfigError("no base runs to branch from")

    registry = build_registry(cfg, base)
    seed = cfg.master_seed if args.seed is None else args.seed

    async def branch_all() -> List[RunRecord]:
        out: List[RunRecord] = []
        try:
            for base_run in bases:
                out.extend(
                    await run_branching(
                        base_run, args.round, args.continuations, registry,
                        master_seed=seed,
                        scenario=scenarios.get(base_run.condition.scenario_id),
                        parallelism=args.parallelism or cfg.parallelism,
                    )
                )
        finally:
            await registry.aclose()
        return out

    continuations = asyncio.run(branch_all())
    output_dir = Path(args.out)
    for record in continuations:
        RunFile(output_dir, record.condition).append(record)
    completed = sum(1 for r in continuations if not r.excluded)
    print(f"{completed}/{len(continuations)} continuations written to {output_dir}")
    return EXIT_OK


# ==================== analyze ====================

CONDITION_FIELDS = [
    "condition", "scenario", "n", "excluded", "lambda", "intercept", "ci_low", "ci_high",
    "p", "flip_rate", "modal_decision", "median_ttm", "fit_window", "status", "note",
]
BRANCHING_FIELDS = [
    "condition", "base_run_id", "branch_round", "continuations", "gamma", "h_k", "mu_d",
    "c_in", "c_out",
]
BRANCHING_SUMMARY_FIELDS = [
    "condition", "branch_round", "bases", "gamma_mean", "gamma_se", "c_in_gt_c_out",
]
ABLATION_FIELDS = [
    "scenario", "full_condition", "ablated_condition", "ablated_role", "delta_lambda",
    "ci_low", "ci_high", "note",
]


def condition_rows(
    groups: Dict[str, List[RunRecord]], window, bootstrap: int, permutations: int, seed: int
) -> Tuple[List[Dict], Dict[str, object]]:
    rows, nulls = [], {}
    for key, runs in groups.items():
        row, null = analysis.analyze_condition(
            key, runs, window, bootstrap, permutations, seed=derive_seed(seed, key, 0)
        )
        rows.append(row)
        if null is not None:
            nulls[key] = null
    return rows, nulls


def branching_rows(records: Iterable[RunRecord]) -> Tuple[List[Dict], List[Dict]]:
    sets: Dict[Tuple[str, int], Dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for record in records:
        if record.is_continuation and not record.excluded:
            sets[(record.condition.key, record.branch_round)][record.base_run_id].append(
                analysis.committee_mean(record)
            )
    rows, summaries = [], []
    for (key, branch_round), by_base in sorted(sets.items()):
        usable = {base: trajs for base, trajs in sorted(by_base.items()) if len(trajs) >= 2}
        if not usable:
            continue
        rounds = next(iter(usable.values()))[0].rounds[-1]
        certificates = analysis.branching_certificate(usable, branch_round, rounds)
        for cert in certificates:
            rows.append({"condition": key, **cert.model_dump()})
        summaries.append(
            {"condition": key, "branch_round": branch_round, **analysis.branching_summary(certificates)}
        )
    return rows, summaries


def ablation_rows(
    groups: Dict[str, List[RunRecord]], window, bootstrap: int, seed: int
) -> List[Dict]:
    rows = []
    for key, runs in groups.items():
        cond = runs[0].condition
        if cond.ablation_target is None:
            continue
        full_key = cond.model_copy(update={"ablation_target": None}).key
        if full_key not in groups:
            continue
        row = {
            "scenario": cond.scenario_id,
            "full_condition": full_key,
            "ablated_condition": key,
            "ablated_role": cond.ablation_target.value,
        }
        try:
            full = [analysis.committee_mean(r) for r in groups[full_key] if not r.excluded]
            ablated = [analysis.committee_mean(r) for r in runs if not r.excluded]
            fit = analysis.resolve_window(full, cond.rounds, window)
            delta, low, high = analysis.ablation_effect(
                full, ablated, fit, bootstrap, seed=derive_seed(seed, key, 1)
            )
            row.update({"delta_lambda": delta, "ci_low": low, "ci_high": high})
        except AnalysisError as e:
            row["note"] = str(e)
        rows.append(row)
    return rows


def cmd_analyze(args) -> int:
    """Per-condition estimates plus branching and ablation tables. Read-only over run files."""
    records = _load(args)
    groups = _groups(records, pool_variants=args.pool_variants)
    out = Path(args.out)
    rows, _ = condition_rows(groups, args.window, args.bootstrap, args.permutations, args.seed)
    write_csv(out / "conditions.csv", rows, CONDITION_FIELDS)
    write_json(out / "conditions.json", rows)

    branch_rows, branch_summaries = branching_rows(records)
    if branch_rows:
        write_csv(out / "branching.csv", branch_rows, BRANCHING_FIELDS)
        write_csv(out / "branching_summary.csv", branch_summaries, BRANCHING_SUMMARY_FIELDS)
    effects = ablation_rows(_groups(records), args.window, args.bootstrap, args.seed)
    if effects:
        write_csv(out / "ablation_effects.csv", effects, ABLATION_FIELDS)

    for row in rows:
        estimate = "-" if row["lambda"] is None else f"{row['lambda']:.4f}"
        print(f"{row['condition']}\tn={row['n']}\tlambda={estimate}\t{row['status']}")

    statuses = {row["status"] for row in rows}
    if "ok" not in statuses and "degenerate" in statuses:
        logger.error("No condition produced an estimate; every ensemble is degenerate or skipped")
        return EXIT_DEGENERATE
    return EXIT_OK


# ==================== landscape ====================

def landscape_rows(groups: Dict[str, List[RunRecord]], window) -> Tuple[List[Dict], List[str]]:
    """Scenario x condition slope matrix with realized n per cell."""
    cells: Dict[str, Dict[str, Dict]] = defaultdict(dict)
    columns = set()
    for key, runs in groups.items():
        scenario = runs[0].condition.scenario_id
        column = key.split("__", 1)[1]
        columns.add(column)
        kept = [r for r in runs if not r.excluded]
        cell = {"n": len(kept), "lambda": None}
        if len(kept) >= 2:
            try:
                trajectories = [analysis.committee_mean(r) for r in kept]
                fit = analysis.resolve_window(trajectories, kept[0].condition.rounds, window)
                d = analysis.divergence_series(trajectories)
                cell["lambda"] = analysis.estimate_lyapunov(d, fit).slope
            except AnalysisError as e:
                logger.warning(f"{key}: no slope ({e})")
        cells[scenario][column] = cell

    ordered = sorted(columns)
    fields = ["scenario"] + [name for col in ordered for name in (col, f"n[{col}]")]
    rows = []
    for scenario in sorted(cells):
        row = {"scenario": scenario}
        for col in ordered:
            cell = cells[scenario].get(col)
            if cell is not None:
                row[col] = cell["lambda"]
                row[f"n[{col}]"] = cell["n"]
        rows.append(row)
    return rows, fields


def cmd_landscape(args) -> int:
    rows, fields = landscape_rows(_groups(_load(args), args.pool_variants), args.window)
    write_csv(Path(args.out) / "landscape.csv", rows, fields)
    print(f"{len(rows)} scenarios x {(len(fields) - 1) // 2} conditions")
    return EXIT_OK


# ==================== accounting ====================

def cmd_accounting(args) -> int:
    targets: Dict[str, int] = {}
    if args.targets:
        with open(args.targets, "r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.targets}: expected a mapping of condition key to target")
        targets = {str(k): int(v) for k, v in loaded.items()}
    rows = run_accounting(_load(args), targets, default_target=args.target, group=args.group)
    table = [
        {"Group": r.group, "Condition": r.condition, "Target": r.target,
         "Realized": r.realized, "Deficit": r.deficit}
        for r in rows
    ]
    write_csv(Path(args.out) / "accounting.csv", table, ["Group", "Condition", "Target", "Realized", "Deficit"])
    for r in rows:
        print(f"{r.group}\t{r.condition}\t{r.target}\t{r.realized}\t{r.deficit}")
    return EXIT_OK


# ==================== export ====================

def cmd_export(args) -> int:
    """Plot-ready series: D(t), TTM CDF, switch summaries, agent trajectories, permutation null."""
    records = _load(args)
    groups = _groups(records, args.pool_variants)
    out = Path(args.out)
    divergence, cdf, switches, trajectories, nulls = [], [], [], [], []

    for key, runs in groups.items():
        kept = [r for r in runs if not r.excluded]
        if not kept:
            continue
        rounds = kept[0].condition.rounds
        metrics = analysis.group_metrics(kept)
        for x, frac in analysis.ttm_cdf(metrics.ttm, rounds):
            cdf.append({"condition": key, "x": x, "cdf": frac})

        by_role: Dict[str, List[int]] = defaultdict(list)
        for run, counts in zip(kept, metrics.switch_counts):
            for slot in run.agents:
                by_role[slot.role.value].append(counts[slot.agent_index])
                by_role["all"].append(counts[slot.agent_index])
            trajectories.extend(analysis.agent_trajectory_rows(run))
        for role in sorted(by_role):
            switches.append({"condition": key, "role": role, **analysis.switch_summary(by_role[role])})

        if len(kept) < 2:
            continue
        means = [analysis.committee_mean(r) for r in kept]
        d = analysis.divergence_series(means)
        for t, value in zip(d.rounds, d.values):
            divergence.append({
                "condition": key, "t": t, "D": value,
                "log_D": math.log(value) if value > 0 else None,
            })
        if args.permutations > 0:
            try:
                fit = analysis.resolve_window(means, rounds, args.window)
                null = analysis.permutation_null(
                    means, args.permutations, fit,
                    seed=derive_seed(args.seed, key, 0) + 1,
                )
            except AnalysisError as e:
                logger.warning(f"{key}: no permutation null ({e})")
                continue
            nulls.extend({"condition": key, "index": i, "lambda_null": float(v)} for i, v in enumerate(null))

    write_csv(out / "divergence.csv", divergence, ["condition", "t", "D", "log_D"])
    write_csv(out / "ttm_cdf.csv", cdf, ["condition", "x", "cdf"])
    write_csv(out / "switch_summary.csv", switches, ["condition", "role", "n", "mean", "sd", "sem"])
    write_csv(
        out / "agent_trajectories.csv", trajectories,
        ["run_id", "agent_index", "role", "label", "round", "p_A", "p_B"],
    )
    if nulls:
        write_csv(out / "permutation_null.csv", nulls, ["condition", "index", "lambda_null"])
    return EXIT_OK


# ==================== validate ====================

def cmd_validate(args) -> int:
    """Check configuration, scenario and run files without executing anything."""
    code = EXIT_OK
    if args.config:
        try:
            cfg = load_matrix_config(args.config)
            base = Path(args.config).resolve().parent
            packets = load_scenarios(cfg.scenarios_path(base))
            known = {p.id for p in packets}
            unknown = [s for s in cfg.scenarios if s not in known]
            if unknown:
                raise ConfigError(f"unknown scenarios {unknown}")
            if cfg.endpoints_file:
                load_endpoints(base / cfg.endpoints_file)
            jobs = expand_matrix(cfg)
            print(f"config OK: {len(jobs)} jobs")
        except (ConfigError, StoreError) as e:
            print(f"config: {e}", file=sys.stderr)
            code = EXIT_CONFIG
    if args.scenarios:
        try:
            print(f"scenarios OK: {len(load_scenarios(args.scenarios))} packets")
        except (ConfigError, StoreError) as e:
            print(f"scenarios: {e}", file=sys.stderr)
            code = code or EXIT_CONFIG
    if args.inputs:
        try:
            records = load_runs(args.inputs, strict=True)
            print(f"runs OK: {len(records)} records")
        except StoreError as e:
            print(f"runs: {e}", file=sys.stderr)
            code = code or EXIT_IO
    return code


# ==================== Parser ====================

def _analysis_flags(parser: argparse.ArgumentParser, bootstrap: bool = True) -> None:
    parser.add_argument("inputs", nargs="+", help="Run files, directories or glob patterns")
    parser.add_argument("--out", default="analysis", help="Output directory (default: analysis)")
    parser.add_argument(
        "--window", type=parse_window, default=DEFAULTS["fit_window"],
        help="Inclusive fit window lo:hi, or auto for the pre-saturation window (default: 3:20)",
    )
    if bootstrap:
        parser.add_argument(
            "--bootstrap", type=int, default=DEFAULTS["bootstrap"],
            help="Bootstrap resamples (default: 500)",
        )
    parser.add_argument("--seed", type=int, default=0, help="Analysis seed (default: 0)")
    parser.add_argument("--lenient", action="store_true", help="Skip malformed lines instead of failing")
    parser.add_argument(
        "--pool-variants", action="store_true",
        help="Pool scenario-variant files of one condition into a single ensemble",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(description="Committee deliberation runner and stability toolkit")
    parser.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level (default: INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="Execute a condition matrix")
    run.add_argument("--config", required=True, help="Matrix configuration YAML")
    run.add_argument("--out", help="Output directory (overrides output_dir)")
    run.add_argument("--parallelism", type=int, help="Concurrent deliberations")
    run.add_argument("--strict-parse", action="store_true", help="Strict STATE line grammar")
    run.add_argument("--backfill", action="store_true", help="Add replicates to cover exclusions")
    run.add_argument("--seed", type=int, help="Master seed (overrides master_seed)")
    run.set_defaults(func=cmd_run)

    branch = sub.add_parser("branch", help="Continue base runs from a branch round")
    branch.add_argument("inputs", nargs="+", help="Run files holding the base runs")
    branch.add_argument("--config", required=True, help="Matrix configuration YAML (backends)")
    branch.add_argument("--round", type=int, required=True, help="Branch round t")
    branch.add_argument("--continuations", type=int, default=30, help="K per base (default: 30)")
    branch.add_argument("--bases", type=int, default=5, help="Base runs to use (default: 5)")
    branch.add_argument("--base-run", action="append", help="Explicit base run id (repeatable)")
    branch.add_argument("--out", default="branches", help="Output directory (default: branches)")
    branch.add_argument("--seed", type=int, help="Master seed for continuation seeds")
    branch.add_argument("--parallelism", type=int, help="Concurrent continuations")
    branch.add_argument("--lenient", action="store_true", help="Skip malformed lines")
    branch.set_defaults(func=cmd_branch)

    analyze = sub.add_parser("analyze", help="Per-condition stability table")
    _analysis_flags(analyze)
    analyze.add_argument(
        "--permutations", type=int, default=DEFAULTS["permutations"],
        help="Permutation count (default: 2000)",
    )
    analyze.set_defaults(func=cmd_analyze)

    landscape = sub.add_parser("landscape", help="Scenario x condition slope matrix")
    _analysis_flags(landscape, bootstrap=False)
    landscape.set_defaults(func=cmd_landscape)

    accounting = sub.add_parser("accounting", help="Target versus realized replicates")
    accounting.add_argument("inputs", nargs="+", help="Run files, directories or glob patterns")
    accounting.add_argument("--target", type=int, default=DEFAULTS["target_replicates"])
    accounting.add_argument("--targets", help="YAML mapping condition key -> target")
    accounting.add_argument("--group", default="Core", help="Group label (default: Core)")
    accounting.add_argument("--out", default="analysis", help="Output directory")
    accounting.add_argument("--lenient", action="store_true", help="Skip malformed lines")
    accounting.set_defaults(func=cmd_accounting)

    export = sub.add_parser("export", help="Plot-ready series files")
    _analysis_flags(export, bootstrap=False)
    export.add_argument(
        "--permutations", type=int, default=DEFAULTS["permutations"],
        help="Permutation null size; 0 skips it (default: 2000)",
    )
    export.set_defaults(func=cmd_export)

    validate = sub.add_parser("validate", help="Validate configuration and run files")
    validate.add_argument("inputs", nargs="*", help="Run files to check strictly")
    validate.add_argument("--config", help="Matrix configuration YAML")
    validate.add_argument("--scenarios", help="Scenario packet file")
    validate.set_defaults(func=cmd_validate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        return args.func(args)
    except DegenerateEnsemble as e:
        logger.error(f"Degenerate ensemble: {e}")
        return EXIT_DEGENERATE
    except (ConfigError, BackendError, ProtocolError, AnalysisError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StoreError, OSError) as e:
        logger.error(f"I/O error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
