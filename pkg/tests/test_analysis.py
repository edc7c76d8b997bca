"""Divergence, slope fits, resampling tests, decision metrics and branching certificates."""
import asyncio
import itertools
import math

import numpy as np
import pytest
from scipy import stats

from agent.synthetic import (
    ConsensusBackend,
    ConsensusDynamicsParams,
    LogisticBackend,
    LogisticDriverParams,
)
from app.analysis import (
    AUTO_WINDOW_CEILING,
    AUTO_WINDOW_FLOOR,
    ablation_effect,
    analyze_condition,
    bootstrap_ci,
    bootstrap_slopes,
    branching_certificate,
    branching_summary,
    calibrated_interval,
    committee_mean,
    divergence_series,
    estimate_lyapunov,
    fit_window_for,
    flip_rate,
    group_metrics,
    jackknife_se,
    lyapunov_analysis,
    median_ttm,
    modal_decision,
    permutation_test,
    presaturation_window,
    resolve_window,
    switch_counts,
    switch_summary,
    time_to_majority,
    ttm_cdf,
)
from app.exceptions import AnalysisError, DegenerateEnsemble
from app.models import CommitteeTrajectory, Condition, DivergenceSeries
from app.protocol import run_deliberation

CENTER = np.full(3, 1.0 / 3.0)
U1 = np.array([1.0, -1.0, 0.0]) / math.sqrt(2.0)
U2 = np.array([1.0, 1.0, -2.0]) / math.sqrt(6.0)


def as_trajectories(means, first_round: int = 1):
    means = np.asarray(means, dtype=float)
    rounds = list(range(first_round, first_round + means.shape[1]))
    return [
        CommitteeTrajectory(
            run_id=f"rep-{i}", rounds=rounds, means=[tuple(float(x) for x in row) for row in rep]
        )
        for i, rep in enumerate(means)
    ]


def exponential_family(rate: float, replicates: int = 5, rounds: int = 20, scale: float = 1e-3):
    """Replicates whose pairwise distances are all proportional to exp(rate * t)."""
    t = np.arange(1, rounds + 1)
    amp = np.arange(1, replicates + 1)[:, None] * scale * np.exp(rate * t)[None, :]
    return as_trajectories(CENTER + amp[:, :, None] * U1)


def noisy_family(rate: float, rng, replicates: int = 20, rounds: int = 20, sigma: float = 0.1):
    t = np.arange(1, rounds + 1)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=replicates)
    dirs = np.cos(angles)[:, None] * U1 + np.sin(angles)[:, None] * U2
    amp = 1e-3 * np.exp(rate * t[None, :] + sigma * rng.standard_normal((replicates, rounds)))
    return as_trajectories(CENTER + amp[:, :, None] * dirs[:, None, :])


def series(values):
    return DivergenceSeries(rounds=list(range(1, len(values) + 1)), values=list(values), replicates=2)


def run(coro):
    return asyncio.run(coro)


# ==================== Divergence ====================

def test_committee_mean(run_factory):
    record = run_factory([[(1, 0, 0), (0, 1, 0)], [(0, 0, 1), (0, 0, 1)]])
    traj = committee_mean(record)
    assert traj.rounds == [1, 2]
    np.testing.assert_allclose(traj.means, [(0.5, 0.5, 0.0), (0.0, 0.0, 1.0)])


def test_divergence_examples():
    same = as_trajectories([[(0.2, 0.3, 0.5)] * 3] * 4)
    assert divergence_series(same).values == [0.0, 0.0, 0.0]
    pair = as_trajectories([[(1, 0, 0)], [(0, 1, 0)]])
    assert divergence_series(pair).values[0] == pytest.approx(math.sqrt(2))
    triple = as_trajectories([[(1, 0, 0)], [(0, 1, 0)], [(0, 0, 1)]])
    assert divergence_series(triple).values[0] == pytest.approx(math.sqrt(2))


def test_divergence_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(100):
        replicates = int(rng.integers(2, 51))
        means = rng.dirichlet([1.0, 1.0, 1.0], size=(replicates, 5))
        d = divergence_series(as_trajectories(means)).values
        for t in range(5):
            pairs = [
                np.linalg.norm(means[i, t] - means[j, t])
                for i, j in itertools.combinations(range(replicates), 2)
            ]
            assert d[t] == pytest.approx(np.mean(pairs), rel=1e-12, abs=1e-15)


def test_divergence_needs_two_trajectories():
    with pytest.raises(AnalysisError):
        divergence_series(as_trajectories([[(1, 0, 0)]]))


def test_presaturation_window():
    d = series([1e-8, 1e-5, 1e-4, 1e-3, 0.5, 1e-3])
    assert presaturation_window(d, floor=1e-6, ceiling=0.1) == (2, 4)
    assert presaturation_window(d, floor=1.0, ceiling=2.0) is None


# ==================== Slopes ====================

@pytest.mark.parametrize("rate", [-0.1, 0.0, 0.05, 0.7])
def test_exact_exponential_slopes(rate):
    t = np.arange(1, 21)
    estimate = estimate_lyapunov(series(1e-6 * np.exp(rate * t)), (3, 20))
    assert estimate.slope == pytest.approx(rate, abs=1e-12)
    assert estimate.intercept == pytest.approx(math.log(1e-6), abs=1e-9)
    assert estimate.fit_window == (3, 20)


def test_slope_is_scale_invariant():
    values = 0.01 * np.exp(0.3 * np.arange(1, 21))
    a = estimate_lyapunov(series(values), (3, 20))
    b = estimate_lyapunov(series(values * 1000.0), (3, 20))
    assert a.slope == pytest.approx(b.slope, abs=1e-12)
    assert b.intercept - a.intercept == pytest.approx(math.log(1000.0))


def test_noisy_slopes_stay_close():
    rng = np.random.default_rng(11)
    t = np.arange(1, 21)
    for _ in range(100):
        values = np.exp(0.08 * t + 0.01 * rng.standard_normal(20))
        assert 0.075 <= estimate_lyapunov(series(values), (3, 20)).slope <= 0.085


def test_degenerate_windows():
    with pytest.raises(DegenerateEnsemble):
        estimate_lyapunov(series(np.zeros(20)), (3, 20))
    values = np.exp(0.1 * np.arange(1, 21))
    mostly_zero = values.copy()
    mostly_zero[2:12] = 0.0
    with pytest.raises(DegenerateEnsemble):
        estimate_lyapunov(series(mostly_zero), (3, 20))
    some_zero = values.copy()
    some_zero[2:10] = 0.0
    assert math.isfinite(estimate_lyapunov(series(some_zero), (3, 20)).slope)


def test_window_outside_the_data():
    with pytest.raises(AnalysisError):
        estimate_lyapunov(series(np.ones(10)), (3, 20))
    with pytest.raises(AnalysisError):
        estimate_lyapunov(series(np.ones(10)), (5, 5))


def test_fit_window_is_clipped_to_the_rounds():
    assert fit_window_for(12, (3, 20)) == (3, 12)
    with pytest.raises(AnalysisError):
        fit_window_for(3, (3, 20))


def test_resolve_window_picks_the_presaturation_range():
    t = np.arange(1, 21)
    amp = np.minimum(1e-9 * np.exp(0.9 * t), 0.2)
    trajs = as_trajectories(CENTER + amp[None, :, None] * np.stack([U1, -U1])[:, None, :])
    d = divergence_series(trajs)
    expected = presaturation_window(d, AUTO_WINDOW_FLOOR, AUTO_WINDOW_CEILING)
    assert resolve_window(trajs, 20, None) == expected
    assert expected[0] > 3 and expected[1] < 20
    assert resolve_window(trajs, 12, (3, 20)) == (3, 12)


def test_resolve_window_without_a_usable_range():
    with pytest.raises(DegenerateEnsemble):
        resolve_window(as_trajectories([[(0.2, 0.3, 0.5)] * 20] * 3), 20, None)
    spread = as_trajectories([[(1.0, 0.0, 0.0)] * 20, [(0.0, 1.0, 0.0)] * 20])
    with pytest.raises(AnalysisError):
        resolve_window(spread, 20, None)


# ==================== Bootstrap ====================

def test_bootstrap_of_exact_family_is_a_point():
    trajs = exponential_family(0.1)
    slopes = bootstrap_slopes(trajs, resamples=500, window=(3, 20), seed=3)
    assert len(slopes) == 500
    low, high = bootstrap_ci(trajs, resamples=500, window=(3, 20), seed=3)
    assert low == pytest.approx(0.1, abs=1e-9)
    assert high == pytest.approx(0.1, abs=1e-9)


def test_bootstrap_is_seeded():
    trajs = noisy_family(0.08, np.random.default_rng(1))
    a = bootstrap_slopes(trajs, resamples=50, window=(3, 20), seed=9)
    b = bootstrap_slopes(trajs, resamples=50, window=(3, 20), seed=9)
    np.testing.assert_array_equal(a, b)


def test_jackknife_se():
    assert jackknife_se(exponential_family(0.1), (3, 20)) == pytest.approx(0.0, abs=1e-9)
    assert jackknife_se(exponential_family(0.1, replicates=2), (3, 20)) is None
    trajs = noisy_family(0.08, np.random.default_rng(4))
    se = jackknife_se(trajs, (3, 20))
    assert 0.0 < se < 0.01


def test_calibrated_interval_only_stretches_a_narrow_spread():
    draws = np.random.default_rng(0).normal(1.0, 0.1, size=4000)
    low, high = calibrated_interval(draws, 1.0, None)
    assert (low, high) == pytest.approx((1.0 - 0.196, 1.0 + 0.196), abs=0.02)
    assert calibrated_interval(draws, 1.0, 0.05) == (low, high)
    scale = 0.2 / np.std(draws, ddof=1)
    wide_low, wide_high = calibrated_interval(draws, 1.0, 0.2)
    assert wide_low == pytest.approx(1.0 - scale * (1.0 - low))
    assert wide_high == pytest.approx(1.0 + scale * (high - 1.0))
    assert calibrated_interval(draws, 2.0, None)[1] == 2.0


def test_bootstrap_interval_covers_the_true_rate():
    rng = np.random.default_rng(2026)
    covered = 0
    for experiment in range(200):
        trajs = noisy_family(0.08, rng)
        low, high = bootstrap_ci(trajs, resamples=500, window=(3, 20), seed=experiment)
        covered += low <= 0.08 <= high
    assert 0.90 <= covered / 200 <= 0.98


# ==================== Permutation test ====================

def test_permutation_p_for_strong_expansion():
    rng = np.random.default_rng(17)
    floor_hits = 0
    for trial in range(100):
        trajs = noisy_family(0.2, rng, replicates=10)
        p = permutation_test(trajs, permutations=1999, window=(3, 20), seed=trial)
        floor_hits += p == pytest.approx(1 / 2000)
    assert floor_hits >= 95


def test_permutation_count_must_be_positive():
    with pytest.raises(AnalysisError):
        permutation_test(exponential_family(0.1), permutations=0, window=(3, 20))


def test_exchangeable_null_is_calibrated():
    rng = np.random.default_rng(314)
    pvalues = []
    for experiment in range(500):
        noise = 0.01 * rng.standard_normal((10, 20, 3))
        noise -= noise.mean(axis=2, keepdims=True)
        p = permutation_test(as_trajectories(CENTER + noise), 99, (3, 20), seed=experiment)
        pvalues.append(p)
    pvalues = np.asarray(pvalues)
    rate = np.mean(pvalues <= 0.05)
    assert 0.03 <= rate <= 0.07
    assert stats.kstest(pvalues, "uniform").statistic < 0.15


def test_lyapunov_analysis_reports_interval_and_p():
    trajs = exponential_family(0.1)
    estimate, null = lyapunov_analysis(trajs, (3, 20), resamples=100, permutations=199, seed=1)
    assert estimate.slope == pytest.approx(0.1, abs=1e-12)
    assert estimate.ci_low <= estimate.slope <= estimate.ci_high
    assert estimate.permutation_count == 199
    assert len(null) == 199
    assert 0.0 < estimate.permutation_p <= 1.0


def test_ablation_effect_of_exact_families():
    delta, low, high = ablation_effect(
        exponential_family(0.1), exponential_family(0.05), (3, 20), resamples=100, seed=2
    )
    assert delta == pytest.approx(0.05, abs=1e-12)
    assert low == pytest.approx(0.05, abs=1e-9)
    assert high == pytest.approx(0.05, abs=1e-9)


# ==================== Decision metrics ====================

def _decided(run_factory, decision, index=0):
    return run_factory([[(0.5, 0.3, 0.2)] * 3] * 2, decisions=[decision] * 3, run_id=f"run-{index}")


def test_flip_rate_and_modal_decision(run_factory):
    runs = [_decided(run_factory, d, i) for i, d in enumerate("AAAB")]
    assert flip_rate(runs) == pytest.approx(0.25)
    assert modal_decision(runs) == ("A", False)
    assert flip_rate(runs[:3]) == 0.0
    tied = [_decided(run_factory, d, i) for i, d in enumerate("BA")]
    assert modal_decision(tied) == ("A", True)
    assert flip_rate(tied) == pytest.approx(0.5)


def test_time_to_majority(run_factory):
    spread = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 0, 0), (0, 1, 0)]
    agree = [(1, 0, 0), (1, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)]
    assert time_to_majority(run_factory([spread, agree, agree])) == 2
    never = run_factory([spread, spread, spread])
    assert time_to_majority(never) is None
    assert median_ttm([None, 2], rounds=3) == 3.0
    assert ttm_cdf([None, 2, 2], rounds=3) == [(2, pytest.approx(2 / 3)), (4, 1.0)]


def test_argmax_ties_resolve_to_the_earlier_option(run_factory):
    tied = [(0.4, 0.4, 0.2)] * 3
    record = run_factory([tied, tied])
    assert time_to_majority(record) == 1


def test_switch_counts(run_factory):
    tops = "AABBA"
    vertex = {"A": (1, 0, 0), "B": (0, 1, 0), "C": (0, 0, 1)}
    prefs = [[vertex[top], (0, 0, 1)] for top in tops]
    assert switch_counts(run_factory(prefs)) == [2, 0]


def test_switch_summary_matches_a_streaming_oracle():
    values = np.random.default_rng(5).integers(0, 12, size=120)
    n, mean, m2 = 0, 0.0, 0.0
    for x in values:
        n += 1
        delta = x - mean
        mean += delta / n
        m2 += delta * (x - mean)
    sd = math.sqrt(m2 / (n - 1))
    summary = switch_summary(list(values))
    assert summary["n"] == 120
    assert summary["mean"] == pytest.approx(mean)
    assert summary["sd"] == pytest.approx(sd)
    assert summary["sem"] == pytest.approx(sd / math.sqrt(120))


def test_group_metrics_skips_nothing_it_should_keep(run_factory):
    runs = [_decided(run_factory, d, i) for i, d in enumerate("AB")]
    metrics = group_metrics(runs)
    assert metrics.modal_decision == "A"
    assert len(metrics.ttm) == 2
    assert metrics.switch_counts == [[0, 0, 0], [0, 0, 0]]


# ==================== Branching ====================

def _branch(offsets, t: int = 5, rounds: int = 20, base=CENTER, direction=U1):
    """Continuations over rounds t..rounds at base + offset(s) * direction."""
    s = np.arange(t, rounds + 1)
    means = [base + np.asarray([f(x) for x in s])[:, None] * direction for f in offsets]
    return as_trajectories(means, first_round=t)


def test_identical_continuations_have_zero_gamma():
    (cert,) = branching_certificate({"base": _branch([lambda s: 0.0] * 4)}, 5, 20)
    assert cert.gamma == 0.0
    assert cert.mu_d == 0.0
    assert cert.c_in == pytest.approx(1.0)
    assert cert.c_out is None
    assert cert.continuations == 4


def test_linear_separation_gamma():
    c = 0.01
    conts = _branch([lambda s: c * (s - 5) / 2, lambda s: -c * (s - 5) / 2])
    (cert,) = branching_certificate({"base": conts}, 5, 20)
    assert cert.mu_d == pytest.approx(0.0, abs=1e-15)
    assert cert.h_k == pytest.approx(c * 16 / 2)
    assert cert.gamma == pytest.approx(0.08)


def test_separated_bases_cluster_inside():
    a = as_trajectories([[(1.0, 0.0, 0.0)] * 16] * 3, first_round=5)
    b = as_trajectories([[(0.0, 1.0, 0.0)] * 16] * 3, first_round=5)
    certs = branching_certificate({"a": a, "b": b}, 5, 20)
    assert [c.c_in for c in certs] == [pytest.approx(1.0)] * 2
    assert [c.c_out for c in certs] == [pytest.approx(0.0)] * 2
    summary = branching_summary(certs)
    assert summary["bases"] == 2
    assert summary["c_in_gt_c_out"] == 2
    assert summary["gamma_mean"] == 0.0


def test_branching_needs_two_continuations():
    with pytest.raises(AnalysisError):
        branching_certificate({"base": _branch([lambda s: 0.0])}, 5, 20)
    with pytest.raises(AnalysisError):
        branching_certificate({"base": _branch([lambda s: 0.0] * 2)}, 4, 20)


# ==================== Condition rows ====================

def test_single_run_condition_is_skipped(run_factory):
    row, null = analyze_condition("HL-01", [_decided(run_factory, "A")], (1, 2), 10, 10)
    assert row["status"] == "skipped"
    assert row["lambda"] is None
    assert null is None


def test_identical_runs_are_degenerate(run_factory):
    runs = [_decided(run_factory, "A", i) for i in range(3)]
    row, null = analyze_condition("HL-01", runs, (1, 2), 10, 10)
    assert row["status"] == "degenerate"
    assert row["modal_decision"] == "A"
    assert null is None


# ==================== Synthetic regimes end to end ====================

def _consensus_ensemble(params: ConsensusDynamicsParams, replicates: int = 20):
    cond = Condition(scenario_id="IM-01", rounds=20)
    records = [
        run(run_deliberation(cond, [ConsensusBackend(params) for _ in range(5)], seed=seed))
        for seed in range(replicates)
    ]
    assert not any(r.excluded for r in records)
    return [committee_mean(r) for r in records]


def test_contracting_dynamics_have_negative_exponent():
    params = ConsensusDynamicsParams(alpha=0.5, beta=0.2, gamma=0.0, initial_concentration=2.0)
    estimate, _ = lyapunov_analysis(
        _consensus_ensemble(params), (3, 20), resamples=100, permutations=199, seed=0
    )
    assert estimate.slope < 0
    assert estimate.permutation_p > 0.5


def test_expanding_dynamics_have_positive_exponent():
    params = ConsensusDynamicsParams(
        alpha=1.2, beta=0.1, gamma=0.01, initial=(1 / 3, 1 / 3, 1 / 3)
    )
    estimate, _ = lyapunov_analysis(
        _consensus_ensemble(params), (3, 20), resamples=100, permutations=199, seed=0
    )
    assert estimate.slope > 0
    assert estimate.permutation_p < 0.05


def test_logistic_driver_recovers_ln2():
    rng = np.random.default_rng(2)
    cond = Condition(scenario_id="IM-01", committee_size=2, rounds=20)
    per_pair = []
    for x0 in rng.uniform(0.1, 0.9, size=20):
        pair = []
        for start in (float(x0), float(x0) + 1e-9):
            backends = [LogisticBackend(LogisticDriverParams(r=4.0, x0=start)) for _ in range(2)]
            pair.append(committee_mean(run(run_deliberation(cond, backends, seed=1))))
        per_pair.append(divergence_series(pair).values)
    d = DivergenceSeries(
        rounds=list(range(1, 21)), values=[float(v) for v in np.mean(per_pair, axis=0)], replicates=40
    )
    window = presaturation_window(d, AUTO_WINDOW_FLOOR, AUTO_WINDOW_CEILING)
    assert window is not None and window[1] - window[0] >= 4
    assert 0.55 <= estimate_lyapunov(d, window).slope <= 0.80
