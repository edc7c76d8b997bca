"""Stability estimands over replicate ensembles.

All functions are pure. Ensembles are handled as stacked arrays of shape
(replicates, rounds, 3); distances never involve the confidence value.
"""
import logging
import math
from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import AnalysisError, DegenerateEnsemble
from app.models import (
    OPTIONS,
    BranchingCertificate,
    CommitteeTrajectory,
    DivergenceSeries,
    GroupMetrics,
    LyapunovEstimate,
    RunRecord,
)

logger = logging.getLogger(__name__)

DIVERGENCE_FLOOR = 1e-12
DEFAULT_WINDOW = (3, 20)
DEFAULT_BOOTSTRAP = 500
DEFAULT_PERMUTATIONS = 2000
DEFAULT_CONFIDENCE = 0.95
PERMUTATION_CHUNK = 250
AUTO_WINDOW_FLOOR = 1e-5
AUTO_WINDOW_CEILING = 0.1


# ==================== Trajectories ====================

def state_array(run: RunRecord) -> np.ndarray:
    """Per-round, per-agent preference triples, shape (rounds, N, 3).

    Raises:
        AnalysisError: excluded run or missing states
    """
    if run.excluded:
        raise AnalysisError(f"run {run.run_id} is excluded")
    cond = run.condition
    prefs = np.full((cond.rounds, cond.committee_size, 3), np.nan)
    for turn in run.turns:
        if turn.state is not None:
            prefs[turn.round - 1, turn.agent_index] = turn.state.pref
    if np.isnan(prefs).any():
        raise AnalysisError(f"run {run.run_id} lacks parsed states for some turns")
    return prefs


def committee_mean(run: RunRecord) -> CommitteeTrajectory:
    """Arithmetic mean of the N preference triples per round."""
    means = state_array(run).mean(axis=1)
    means = means / means.sum(axis=1, keepdims=True)
    return CommitteeTrajectory(
        run_id=run.run_id,
        rounds=list(range(1, run.condition.rounds + 1)),
        means=[tuple(float(x) for x in row) for row in means],
    )


def stack_trajectories(trajectories: Sequence[CommitteeTrajectory]) -> Tuple[np.ndarray, List[int]]:
    """Stack trajectories into an (R, T, 3) array.

    Raises:
        AnalysisError: fewer than 2 trajectories or mismatched round coverage
    """
    if len(trajectories) < 2:
        raise AnalysisError(f"need at least 2 trajectories, got {len(trajectories)}")
    rounds = list(trajectories[0].rounds)
    for traj in trajectories[1:]:
        if list(traj.rounds) != rounds:
            raise AnalysisError(f"trajectory {traj.run_id} covers different rounds")
    return np.asarray([traj.means for traj in trajectories], dtype=float), rounds


def _pairwise_divergence(ensemble: np.ndarray) -> np.ndarray:
    """Mean pairwise Euclidean distance per round.

    Accepts (R, T, 3) or a batch (..., R, T, 3); returns (..., T).
    """
    i, j = np.triu_indices(ensemble.shape[-3], k=1)
    diffs = ensemble[..., i, :, :] - ensemble[..., j, :, :]
    return np.linalg.norm(diffs, axis=-1).mean(axis=-2)


def divergence_series(trajectories: Sequence[CommitteeTrajectory]) -> DivergenceSeries:
    ensemble, rounds = stack_trajectories(trajectories)
    values = _pairwise_divergence(ensemble)
    return DivergenceSeries(
        rounds=rounds, values=[float(v) for v in values], replicates=len(trajectories)
    )


def presaturation_window(
    d: DivergenceSeries, floor: float, ceiling: float
) -> Optional[Tuple[int, int]]:
    """Longest contiguous round range with floor <= D(t) <= ceiling (earliest wins on ties)."""
    best: Optional[Tuple[int, int]] = None
    start = None
    for pos, value in enumerate(d.values + [math.nan]):
        inside = floor <= value <= ceiling
        if inside and start is None:
            start = pos
        elif not inside and start is not None:
            if best is None or pos - start > best[1] - best[0] + 1:
                best = (start, pos - 1)
            start = None
    if best is None:
        return None
    return d.rounds[best[0]], d.rounds[best[1]]


# ==================== Slope fits ====================

def _window_slice(rounds: Sequence[int], window: Tuple[int, int]) -> slice:
    lo, hi = window
    if lo > hi:
        raise AnalysisError(f"empty fit window {window}")
    if lo not in rounds or hi not in rounds:
        raise AnalysisError(f"fit window {window} outside data rounds {rounds[0]}..{rounds[-1]}")
    start, stop = rounds.index(lo), rounds.index(hi) + 1
    if stop - start < 2:
        raise AnalysisError(f"fit window {window} needs at least two rounds")
    return slice(start, stop)


def _ols(t: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form least squares along the last axis of y."""
    tc = t - t.mean()
    slope = (y * tc).sum(axis=-1) / (tc ** 2).sum()
    intercept = y.mean(axis=-1) - slope * t.mean()
    return slope, intercept


def _log_divergence(values: np.ndarray, check: bool = True) -> np.ndarray:
    floored = values < DIVERGENCE_FLOOR
    if check and floored.sum() * 2 > values.shape[-1]:
        raise DegenerateEnsemble(
            f"D(t) is zero on {int(floored.sum())} of {values.shape[-1]} fit rounds"
        )
    return np.log(np.maximum(values, DIVERGENCE_FLOOR))


def estimate_lyapunov(
    d: DivergenceSeries, window: Tuple[int, int] = DEFAULT_WINDOW
) -> LyapunovEstimate:
    """OLS slope of ln D(t) over an inclusive round window.

    Raises:
        AnalysisError: window outside the data
        DegenerateEnsemble: D(t) is zero on more than half of the window
    """
    sl = _window_slice(d.rounds, window)
    t = np.asarray(d.rounds[sl], dtype=float)
    y = _log_divergence(np.asarray(d.values[sl], dtype=float))
    slope, intercept = _ols(t, y)
    return LyapunovEstimate(slope=float(slope), intercept=float(intercept), fit_window=window)


def bootstrap_slopes(
    trajectories: Sequence[CommitteeTrajectory],
    resamples: int = DEFAULT_BOOTSTRAP,
    window: Tuple[int, int] = DEFAULT_WINDOW,
    seed: int = 0,
) -> np.ndarray:
    """Slopes from `resamples` replicate resamples drawn with replacement.

    Resamples with fewer than two distinct replicates or a degenerate fit are
    redrawn, up to 10 * resamples attempts.
    """
    if resamples < 1:
        raise AnalysisError("bootstrap needs at least one resample")
    ensemble, rounds = stack_trajectories(trajectories)
    sl = _window_slice(rounds, window)
    t = np.asarray(rounds[sl], dtype=float)
    windowed = ensemble[:, sl]
    _log_divergence(_pairwise_divergence(windowed))

    rng = np.random.default_rng(seed)
    n = len(trajectories)
    slopes: List[float] = []
    attempts = 0
    while len(slopes) < resamples:
        attempts += 1
        if attempts > 10 * resamples:
            raise DegenerateEnsemble(
                f"only {len(slopes)} of {resamples} bootstrap resamples were estimable"
            )
        idx = rng.integers(0, n, size=n)
        if len(np.unique(idx)) < 2:
            continue
        try:
            y = _log_divergence(_pairwise_divergence(windowed[idx]))
        except DegenerateEnsemble:
            continue
        slopes.append(float(_ols(t, y)[0]))
    return np.asarray(slopes)


def jackknife_se(
    trajectories: Sequence[CommitteeTrajectory],
    window: Tuple[int, int] = DEFAULT_WINDOW,
) -> Optional[float]:
    """Leave-one-replicate-out standard error of the slope.

    Returns None below three replicates or when a leave-one-out ensemble is degenerate.
    """
    ensemble, rounds = stack_trajectories(trajectories)
    n = len(ensemble)
    if n < 3:
        return None
    sl = _window_slice(rounds, window)
    t = np.asarray(rounds[sl], dtype=float)
    windowed = ensemble[:, sl]
    i, j = np.triu_indices(n, k=1)
    dist = np.linalg.norm(windowed[i] - windowed[j], axis=-1)
    touching = np.zeros((n, dist.shape[1]))
    np.add.at(touching, i, dist)
    np.add.at(touching, j, dist)
    left_out = (dist.sum(axis=0) - touching) / (len(i) - (n - 1))
    slopes = []
    for values in left_out:
        try:
            slopes.append(float(_ols(t, _log_divergence(values))[0]))
        except DegenerateEnsemble:
            return None
    slopes = np.asarray(slopes)
    return float(math.sqrt((n - 1) / n * ((slopes - slopes.mean()) ** 2).sum()))


def calibrated_interval(
    draws: np.ndarray,
    estimate: float,
    target_se: Optional[float],
    confidence: float = DEFAULT_CONFIDENCE,
) -> Tuple[float, float]:
    """Percentile interval of `draws`, stretched about `estimate` when their spread is below target_se.

    The result always contains the estimate.
    """
    tail = 100.0 * (1.0 - confidence) / 2.0
    low, high = (float(q) for q in np.percentile(draws, [tail, 100.0 - tail]))
    spread = float(np.std(draws, ddof=1)) if len(draws) > 1 else 0.0
    if target_se is not None and spread > 0.0 and target_se > spread:
        scale = target_se / spread
        logger.debug(f"Bootstrap spread {spread:.3g} below jackknife SE {target_se:.3g}; scaling by {scale:.3f}")
        low = estimate - scale * (estimate - low)
        high = estimate + scale * (high - estimate)
    return min(low, estimate), max(high, estimate)


def bootstrap_ci(
    trajectories: Sequence[CommitteeTrajectory],
    resamples: int = DEFAULT_BOOTSTRAP,
    window: Tuple[int, int] = DEFAULT_WINDOW,
    confidence: float = DEFAULT_CONFIDENCE,
    seed: int = 0,
) -> Tuple[float, float]:
    """Percentile interval of the bootstrap slope distribution.

    Resampled pairwise means understate the slope's spread, so the percentiles
    are stretched to the jackknife standard error when that is wider.
    """
    estimate = estimate_lyapunov(divergence_series(trajectories), window).slope
    slopes = bootstrap_slopes(trajectories, resamples, window, seed)
    return calibrated_interval(slopes, estimate, jackknife_se(trajectories, window), confidence)


def permutation_null(
    trajectories: Sequence[CommitteeTrajectory],
    permutations: int = DEFAULT_PERMUTATIONS,
    window: Tuple[int, int] = DEFAULT_WINDOW,
    seed: int = 0,
) -> np.ndarray:
    """Slopes after shuffling round order independently within every replicate."""
    if permutations < 1:
        raise AnalysisError("permutation test needs at least one permutation")
    ensemble, rounds = stack_trajectories(trajectories)
    sl = _window_slice(rounds, window)
    t = np.asarray(rounds[sl], dtype=float)
    n_rep, n_rounds = ensemble.shape[:2]
    rng = np.random.default_rng(seed)
    rep_idx = np.arange(n_rep)[None, :, None]

    null = []
    for start in range(0, permutations, PERMUTATION_CHUNK):
        size = min(PERMUTATION_CHUNK, permutations - start)
        order = rng.permuted(np.broadcast_to(np.arange(n_rounds), (size, n_rep, n_rounds)), axis=-1)
        shuffled = ensemble[rep_idx, order]
        y = _log_divergence(_pairwise_divergence(shuffled)[..., sl], check=False)
        null.append(_ols(t, y)[0])
    return np.concatenate(null)


def permutation_test(
    trajectories: Sequence[CommitteeTrajectory],
    permutations: int = DEFAULT_PERMUTATIONS,
    window: Tuple[int, int] = DEFAULT_WINDOW,
    seed: int = 0,
) -> float:
    """Add-one permutation p-value for the observed slope."""
    if permutations < 1:
        raise AnalysisError("permutation test needs at least one permutation")
    observed = estimate_lyapunov(divergence_series(trajectories), window).slope
    null = permutation_null(trajectories, permutations, window, seed)
    return float((1 + np.count_nonzero(null >= observed)) / (permutations + 1))


def lyapunov_analysis(
    trajectories: Sequence[CommitteeTrajectory],
    window: Tuple[int, int] = DEFAULT_WINDOW,
    resamples: int = DEFAULT_BOOTSTRAP,
    permutations: int = DEFAULT_PERMUTATIONS,
    seed: int = 0,
) -> Tuple[LyapunovEstimate, np.ndarray]:
    """Slope, bootstrap CI and permutation p for one ensemble; also returns the null slopes."""
    estimate = estimate_lyapunov(divergence_series(trajectories), window)
    low, high = bootstrap_ci(trajectories, resamples, window, seed=seed)
    null = permutation_null(trajectories, permutations, window, seed=seed + 1)
    p = float((1 + np.count_nonzero(null >= estimate.slope)) / (permutations + 1))
    return (
        estimate.model_copy(
            update={
                "ci_low": low,
                "ci_high": high,
                "bootstrap_resamples": resamples,
                "permutation_p": p,
                "permutation_count": permutations,
            }
        ),
        null,
    )


def ablation_effect(
    full: Sequence[CommitteeTrajectory],
    ablated: Sequence[CommitteeTrajectory],
    window: Tuple[int, int] = DEFAULT_WINDOW,
    resamples: int = DEFAULT_BOOTSTRAP,
    confidence: float = DEFAULT_CONFIDENCE,
    seed: int = 0,
) -> Tuple[float, float, float]:
    """Slope difference full minus ablated, with a CI from independent resampling of both."""
    delta = (
        estimate_lyapunov(divergence_series(full), window).slope
        - estimate_lyapunov(divergence_series(ablated), window).slope
    )
    diffs = bootstrap_slopes(full, resamples, window, seed) - bootstrap_slopes(
        ablated, resamples, window, seed + 1
    )
    se_full, se_ablated = jackknife_se(full, window), jackknife_se(ablated, window)
    target = None
    if se_full is not None and se_ablated is not None:
        target = math.sqrt(se_full ** 2 + se_ablated ** 2)
    low, high = calibrated_interval(diffs, delta, target, confidence)
    return float(delta), low, high


# ==================== Decision metrics ====================

def _argmax_option(pref: Sequence[float]) -> Tuple[int, bool]:
    best = max(pref)
    return list(pref).index(best), list(pref).count(best) > 1


def modal_decision(runs: Sequence[RunRecord]) -> Tuple[str, bool]:
    """Most frequent clerk decision; ties resolve to the earliest option and are flagged."""
    decisions = [r.clerk.decision for r in runs if not r.excluded and r.clerk is not None]
    if not decisions:
        raise AnalysisError("no non-excluded runs")
    counts = Counter(decisions)
    best = max(counts.values())
    leaders = [option for option in OPTIONS if counts.get(option, 0) == best]
    if len(leaders) > 1:
        logger.warning(f"Modal decision tied between {leaders}; using {leaders[0]}")
    return leaders[0], len(leaders) > 1


def flip_rate(runs: Sequence[RunRecord]) -> float:
    """Fraction of runs whose final decision differs from the modal decision."""
    modal, _ = modal_decision(runs)
    decisions = [r.clerk.decision for r in runs if not r.excluded and r.clerk is not None]
    return sum(1 for d in decisions if d != modal) / len(decisions)


def time_to_majority(run: RunRecord, threshold: Optional[int] = None) -> Optional[int]:
    """First round where at least `threshold` agents share a top option; None means Never."""
    prefs = state_array(run)
    n = run.condition.committee_size
    threshold = threshold or math.ceil((n + 1) / 2)
    ties = 0
    for round_index, round_prefs in enumerate(prefs, start=1):
        tops = []
        for pref in round_prefs:
            top, tied = _argmax_option(pref)
            ties += tied
            tops.append(top)
        if max(Counter(tops).values()) >= threshold:
            if ties:
                logger.debug(f"{run.run_id}: {ties} argmax ties resolved by option order")
            return round_index
    return None


def switch_counts(run: RunRecord) -> List[int]:
    """Per agent, rounds whose top option differs from the previous round's."""
    tops = np.argmax(state_array(run), axis=2)
    return [int(x) for x in (tops[1:] != tops[:-1]).sum(axis=0)]


def group_metrics(runs: Sequence[RunRecord]) -> GroupMetrics:
    kept = [r for r in runs if not r.excluded]
    if not kept:
        raise AnalysisError("no non-excluded runs")
    modal, tie = modal_decision(kept)
    return GroupMetrics(
        flip_rate=flip_rate(kept),
        modal_decision=modal,
        modal_tie=tie,
        ttm=[time_to_majority(r) for r in kept],
        switch_counts=[switch_counts(r) for r in kept],
    )


def median_ttm(ttm: Sequence[Optional[int]], rounds: int) -> float:
    """Median with Never counted as rounds + 1."""
    return float(np.median([rounds + 1 if t is None else t for t in ttm]))


def ttm_cdf(ttm: Sequence[Optional[int]], rounds: int) -> List[Tuple[int, float]]:
    """Empirical CDF points (x, fraction <= x); Never is placed at rounds + 1."""
    xs = np.sort([rounds + 1 if t is None else t for t in ttm])
    return [
        (int(x), float(np.searchsorted(xs, x, side="right") / len(xs)))
        for x in np.unique(xs)
    ]


def switch_summary(values: Sequence[int]) -> Dict[str, float]:
    """Mean, sample SD and SEM of switch counts."""
    arr = np.asarray(values, dtype=float)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {
        "n": len(arr),
        "mean": float(arr.mean()),
        "sd": sd,
        "sem": sd / math.sqrt(len(arr)) if len(arr) else 0.0,
    }


# ==================== Branching ====================

def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).sum(axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def branching_certificate(
    branch_sets: Dict[str, Sequence[CommitteeTrajectory]],
    branch_round: int,
    rounds: int,
) -> List[BranchingCertificate]:
    """Branching-entropy certificate per base state.

    Args:
        branch_sets: Base run id -> continuation trajectories covering rounds branch_round..rounds
        branch_round: Round after which the continuations diverge
        rounds: Final round of every continuation

    Raises:
        AnalysisError: fewer than two continuations or a mismatched horizon
    """
    if not 1 <= branch_round < rounds:
        raise AnalysisError(f"branch round {branch_round} outside 1..{rounds - 1}")
    finals: Dict[str, np.ndarray] = {}
    stacked: Dict[str, np.ndarray] = {}
    for base_id, continuations in branch_sets.items():
        if len(continuations) < 2:
            raise AnalysisError(f"base {base_id}: need at least 2 continuations")
        for traj in continuations:
            if branch_round not in traj.rounds or traj.rounds[-1] != rounds:
                raise AnalysisError(
                    f"continuation {traj.run_id} does not cover rounds {branch_round}..{rounds}"
                )
        ensemble, covered = stack_trajectories(continuations)
        start = covered.index(branch_round)
        stacked[base_id] = ensemble[:, start:]
        finals[base_id] = ensemble[:, -1]

    certificates = []
    for base_id, ensemble in stacked.items():
        divergence = _pairwise_divergence(ensemble)
        mu_d = float(divergence[0])
        h_k = float(divergence[1:].mean())
        own = finals[base_id]
        i, j = np.triu_indices(len(own), k=1)
        c_in = float(_cosine(own[i], own[j]).mean())
        others = [v for k, v in finals.items() if k != base_id]
        c_out = None
        if others:
            other = np.concatenate(others)
            c_out = float(_cosine(own[:, None, :], other[None, :, :]).mean())
        certificates.append(
            BranchingCertificate(
                base_run_id=base_id,
                branch_round=branch_round,
                continuations=len(ensemble),
                gamma=h_k - mu_d,
                h_k=h_k,
                mu_d=mu_d,
                c_in=float(np.clip(c_in, -1.0, 1.0)),
                c_out=None if c_out is None else float(np.clip(c_out, -1.0, 1.0)),
            )
        )
    return certificates


def branching_summary(certificates: Sequence[BranchingCertificate]) -> Dict[str, float]:
    """Mean Gamma with standard error, and how many bases cluster tighter inside than across."""
    gammas = np.asarray([c.gamma for c in certificates], dtype=float)
    se = float(gammas.std(ddof=1) / math.sqrt(len(gammas))) if len(gammas) > 1 else 0.0
    separated = sum(1 for c in certificates if c.c_out is not None and c.c_in > c.c_out)
    return {
        "bases": len(certificates),
        "gamma_mean": float(gammas.mean()) if len(gammas) else math.nan,
        "gamma_se": se,
        "c_in_gt_c_out": separated,
    }


def agent_trajectory_rows(run: RunRecord) -> List[Dict]:
    """Plot rows: per agent per round, p_A and p_B with the agent's role."""
    prefs = state_array(run)
    rows = []
    for slot in run.agents:
        for round_index in range(1, run.condition.rounds + 1):
            pref = prefs[round_index - 1, slot.agent_index]
            rows.append({
                "run_id": run.run_id,
                "agent_index": slot.agent_index,
                "role": slot.role.value,
                "label": slot.label,
                "round": round_index,
                "p_A": round(float(pref[0]), 6),
                "p_B": round(float(pref[1]), 6),
            })
    return rows


# ==================== Condition tables ====================

def fit_window_for(rounds: int, window: Tuple[int, int]) -> Tuple[int, int]:
    """Clip a requested window to the rounds a condition actually has."""
    lo, hi = window
    hi = min(hi, rounds)
    if hi - lo < 1:
        raise AnalysisError(f"fit window {window} leaves fewer than two rounds of {rounds}")
    return lo, hi


def resolve_window(
    trajectories: Sequence[CommitteeTrajectory],
    rounds: int,
    window: Optional[Tuple[int, int]],
    floor: float = AUTO_WINDOW_FLOOR,
    ceiling: float = AUTO_WINDOW_CEILING,
) -> Tuple[int, int]:
    """Requested window clipped to the rounds, or the pre-saturation window when window is None.

    Raises:
        DegenerateEnsemble: no usable window and D(t) is zero on most rounds
        AnalysisError: no run of at least two rounds inside [floor, ceiling]
    """
    if window is not None:
        return fit_window_for(rounds, window)
    d = divergence_series(trajectories)
    found = presaturation_window(d, floor, ceiling)
    if found is None or found[1] - found[0] < 1:
        zero = sum(1 for v in d.values if v < DIVERGENCE_FLOOR)
        if zero * 2 > len(d.values):
            raise DegenerateEnsemble(f"D(t) is zero on {zero} of {len(d.values)} rounds")
        raise AnalysisError(f"no two consecutive rounds with {floor:g} <= D(t) <= {ceiling:g}")
    logger.debug(f"Pre-saturation window {found[0]}:{found[1]}")
    return fit_window_for(rounds, found)


def analyze_condition(
    key: str,
    runs: Sequence[RunRecord],
    window: Optional[Tuple[int, int]] = DEFAULT_WINDOW,
    resamples: int = DEFAULT_BOOTSTRAP,
    permutations: int = DEFAULT_PERMUTATIONS,
    seed: int = 0,
) -> Tuple[Dict, Optional[np.ndarray]]:
    """One condition-table row plus the permutation null (None when not estimable).

    Status is "ok", "skipped" (fewer than two runs) or "degenerate". A window of
    None selects the pre-saturation window.
    """
    kept = [r for r in runs if not r.excluded]
    row: Dict = {
        "condition": key,
        "scenario": runs[0].condition.scenario_id if runs else "",
        "n": len(kept),
        "excluded": len(runs) - len(kept),
        "lambda": None,
        "intercept": None,
        "ci_low": None,
        "ci_high": None,
        "p": None,
        "flip_rate": None,
        "modal_decision": None,
        "median_ttm": None,
        "fit_window": None,
        "status": "ok",
        "note": "",
    }
    if len(kept) < 2:
        row["status"] = "skipped"
        row["note"] = f"{len(kept)} non-excluded runs; need at least 2"
        return row, None

    rounds = kept[0].condition.rounds
    metrics = group_metrics(kept)
    row["flip_rate"] = round(metrics.flip_rate, 6)
    row["modal_decision"] = metrics.modal_decision + ("*" if metrics.modal_tie else "")
    row["median_ttm"] = median_ttm(metrics.ttm, rounds)

    try:
        trajectories = [committee_mean(r) for r in kept]
        fit = resolve_window(trajectories, rounds, window)
        row["fit_window"] = f"{fit[0]}:{fit[1]}"
        estimate, null = lyapunov_analysis(trajectories, fit, resamples, permutations, seed)
    except DegenerateEnsemble as e:
        logger.warning(f"{key}: degenerate ensemble ({e})")
        row["status"] = "degenerate"
        row["note"] = str(e)
        return row, None
    except AnalysisError as e:
        row["status"] = "skipped"
        row["note"] = str(e)
        return row, None
    row.update({
        "lambda": estimate.slope,
        "intercept": estimate.intercept,
        "ci_low": estimate.ci_low,
        "ci_high": estimate.ci_high,
        "p": estimate.permutation_p,
    })
    return row, null
