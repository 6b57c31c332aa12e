import math

import numpy as np
import pytest

from boosttail.analytics import (
    ConstantBoost,
    CurveBoost,
    ThetaOptimalBoost,
    crossing_work_transform,
    solve_gamma,
)
from boosttail.batch import busy_periods, fcfs_departures
from boosttail.dist import Exponential, FiniteLabels, Uniform, benchmark_distributions
from boosttail.errors import ConfigError, InsufficientDataError, PairingError
from boosttail.policy import PolicySpec
from boosttail.sim import (
    ArrivalTrace,
    default_warmup,
    default_window,
    empirical_tail_constant,
    empirical_tir,
    generate_trace,
    generator,
    quantile,
    replay_cheat,
    run,
    sample_crossing_work,
    survival,
    tir_plateau,
)

EXP = Exponential(1.0)


@pytest.fixture(scope="module")
def mm1():
    tr = generate_trace(0.8, EXP, 5_000_000, seed=11)
    return tr, run(tr, PolicySpec.fcfs())


# traces

def test_single_job_trace():
    tr = generate_trace(0.5, EXP, 1, seed=0)
    assert tr.n == 1
    assert tr.arrivals[0] == generator(0, 0).exponential(2.0)


def test_trace_is_deterministic():
    a = generate_trace(0.8, EXP, 1000, seed=5)
    b = generate_trace(0.8, EXP, 1000, seed=5)
    assert a.arrivals.tobytes() == b.arrivals.tobytes()
    assert a.sizes.tobytes() == b.sizes.tobytes()
    assert not np.array_equal(a.arrivals, generate_trace(0.8, EXP, 1000, seed=6).arrivals)


def test_interarrival_mean():
    tr = generate_trace(0.8, EXP, 1_000_000, seed=1)
    gaps = np.diff(tr.arrivals, prepend=0.0)
    assert abs(gaps.mean() - 1.25) < 4 * 1.25 / math.sqrt(gaps.size)


def test_sizes_do_not_depend_on_rate():
    # arrivals and sizes come from separate streams
    assert np.array_equal(generate_trace(0.3, EXP, 100, 2).sizes, generate_trace(0.9, EXP, 100, 2).sizes)


def test_trace_validation():
    with pytest.raises(ConfigError):
        generate_trace(0.8, EXP, 0, 0)
    with pytest.raises(ConfigError):
        ArrivalTrace.from_jobs([(1.0, 1.0), (0.5, 1.0)])
    with pytest.raises(ConfigError):
        generate_trace(0.8, FiniteLabels.from_pairs([(1, 1.0, EXP)]), 10, 0, noise_sigma=0.5)


def test_noisy_trace_keeps_true_sizes():
    tr = generate_trace(0.8, EXP, 10_000, 3, noise_sigma=0.5)
    assert np.array_equal(tr.sizes, generate_trace(0.8, EXP, 10_000, 3).sizes)
    log_ratio = np.log(tr.labels / tr.sizes)
    assert abs(log_ratio.std() - 0.5) < 0.02


def test_default_warmup():
    assert default_warmup(5_000_000) == 50_000
    assert default_warmup(200_000) == 10_000
    assert default_warmup(1000) == 100


# runs

def test_hand_traces():
    assert run(ArrivalTrace.from_jobs([(0.0, 2.0)]), PolicySpec.fcfs(), warmup=0).responses.tolist() == [2.0]
    r = run(ArrivalTrace.from_jobs([(0.0, 3.0), (1.0, 1.0)]), PolicySpec.fcfs(), warmup=0).responses
    assert r.tolist() == [3.0, 3.0]


def test_arrival_at_completion_instant_joins_busy_period():
    tr = ArrivalTrace.from_jobs([(0.0, 1.0), (1.0, 1.0), (2.5, 1.0)])
    bp = busy_periods(tr)
    assert bp.first.tolist() == [0, 2]
    assert bp.ends.tolist() == [2.0, 3.5]


def test_unknown_engine():
    with pytest.raises(ConfigError):
        run(ArrivalTrace.from_jobs([(0.0, 1.0)]), PolicySpec.fcfs(), engine="turbo")


def test_run_is_deterministic():
    tr = generate_trace(0.8, EXP, 20_000, 4)
    spec = PolicySpec.boost(ThetaOptimalBoost(0.2, EXP))
    assert run(tr, spec).departures.tobytes() == run(tr, spec).departures.tobytes()


def test_fast_kernels_match_reference_engine():
    specs = [
        PolicySpec.fcfs(),
        PolicySpec.boost(ThetaOptimalBoost(0.2, EXP)),
        PolicySpec.boost(ThetaOptimalBoost(0.2, EXP), preemptive=True),
        PolicySpec.srpt(),
        PolicySpec.nudge(),
        PolicySpec.nudge_k(3),
        PolicySpec.nudge_m(4),
    ]
    for seed in range(20):
        tr = generate_trace(0.8, EXP, 300, seed)
        for spec in specs:
            fast = run(tr, spec).departures
            ref = run(tr, spec, engine="reference").departures
            np.testing.assert_allclose(fast, ref, rtol=0, atol=1e-9)


def test_fcfs_kernel_matches_lindley_recursion():
    tr = generate_trace(0.9, EXP, 50_000, 8)
    np.testing.assert_array_equal(run(tr, PolicySpec.fcfs()).departures, fcfs_departures(tr.arrivals, tr.sizes))


@pytest.mark.parametrize("name", ["uniform", "hyperexponential"])
def test_responses_at_least_sizes(name):
    d = benchmark_distributions()[name]
    tr = generate_trace(0.8, d, 50_000, 2)
    for spec in (PolicySpec.fcfs(), PolicySpec.boost(ThetaOptimalBoost(0.1, d)), PolicySpec.srpt(), PolicySpec.nudge_m(3)):
        r = run(tr, spec)
        assert np.all(r.responses >= tr.sizes - 1e-9)
        # the last departure equals total work plus total idle time
        assert r.departures.max() == pytest.approx(busy_periods(tr).ends[-1], rel=1e-12)


def test_mm1_mean_response(mm1):
    _, fcfs = mm1
    assert fcfs.kept.mean() == pytest.approx(5.0, rel=0.02)


def test_mm1_survival_matches_exponential_law(mm1):
    _, fcfs = mm1
    t = np.array([5.0, 10.0, 20.0])
    curve = survival(fcfs, t)
    # successive responses are correlated, so the binomial error is far too
    # small here; use batch means over 100 contiguous blocks instead
    blocks = np.array([(b[:, None] > t).mean(axis=0) for b in np.array_split(fcfs.kept, 100)])
    se = blocks.std(axis=0, ddof=1) / 10
    assert np.all(se > curve.stderr)
    assert np.all(np.abs(curve.survival - np.exp(-0.2 * t)) <= 3 * se)


def test_mm1_tail_constant(mm1):
    _, fcfs = mm1
    est = empirical_tail_constant(fcfs, 0.2, window=(10.0, 30.0))
    assert est.value == pytest.approx(1.0, rel=0.10)
    assert est.stderr > 0


# cheating replay

def test_cheat_hand_trace():
    tr = ArrivalTrace.from_jobs([(0.0, 2.0), (1.0, 1.0)])
    boost = CurveBoost(lambda s: 5.0 if s < 1.5 else 0.0)
    r = replay_cheat(tr, boost, warmup=0).responses
    assert r.tolist() == [3.0, 0.0]


def test_cheat_single_job_period_equals_fcfs():
    tr = ArrivalTrace.from_jobs([(0.0, 1.0), (5.0, 2.0)])
    r = replay_cheat(tr, ConstantBoost(3.0), warmup=0).responses
    assert r.tolist() == [1.0, 2.0]


def test_cheat_can_be_negative():
    tr = ArrivalTrace.from_jobs([(0.0, 3.0), (2.0, 0.5)])
    r = replay_cheat(tr, CurveBoost(lambda s: 10.0 if s < 1 else 0.0), warmup=0).responses
    assert r[1] == -1.5


def test_cheat_zero_boost_is_fcfs():
    tr = generate_trace(0.8, EXP, 10_000, 9)
    np.testing.assert_allclose(
        replay_cheat(tr, ConstantBoost(0.0)).departures, run(tr, PolicySpec.fcfs()).departures, rtol=1e-12
    )


# response-time bounds under Boost and Cheat, checked job by job

@pytest.mark.parametrize("name", ["exponential", "hyperexponential", "bounded_lomax"])
@pytest.mark.parametrize("preemptive", [False, True])
def test_tagged_job_sandwich(name, preemptive):
    dist = benchmark_distributions()[name]
    lam = 0.8 / dist.mean
    boost = ThetaOptimalBoost(float(solve_gamma(lam, dist)), dist)
    n = 2000
    tr = generate_trace(lam, dist, n, seed=21)
    a, s = tr.arrivals, tr.sizes
    b = boost.many(tr.labels)
    tau = a - b
    fcfs_d = fcfs_departures(a, s)
    samples = (
        run(tr, PolicySpec.boost(boost, preemptive=preemptive), warmup=0).responses,
        replay_cheat(tr, boost, warmup=0).responses,
    )
    idx = np.arange(n)
    for j in range(n - 1000, n):
        # state at the tagged job's boosted arrival time
        prev = np.searchsorted(a, tau[j], "left") - 1
        work = max(0.0, fcfs_d[prev] - tau[j]) if prev >= 0 else 0.0
        later = (a > tau[j]) & (idx != j)
        crossing = later & (tau <= tau[j])
        v_w = s[crossing & (a < tau[j] + work)].sum()
        v_inf = s[crossing].sum()
        v_bar = s[later & (tau > tau[j])].sum()
        lower = work - b[j] + v_w + s[j]
        upper = max(work - b[j], 0.0) + v_inf + s[j] + v_bar * (work < b[j])
        for r in samples:
            assert lower - 1e-9 <= r[j] <= upper + 1e-9


def test_theta_cost_dominance():
    g = 0.2
    theta = 0.8 * g
    boost = ThetaOptimalBoost(theta, EXP)
    tr = generate_trace(0.8, EXP, 1_000_000, seed=13)
    cheat = replay_cheat(tr, boost)
    others = (run(tr, PolicySpec.fcfs()), run(tr, PolicySpec.boost(boost)))
    blocks = np.array_split(np.exp(theta * cheat.kept), 100)
    for other in others:
        diff = np.array_split(np.exp(theta * other.kept), 100)
        d = np.array([x.mean() - y.mean() for x, y in zip(blocks, diff)])
        se = d.std(ddof=1) / math.sqrt(d.size)
        assert d.mean() <= 2 * se


# statistics

def test_survival_trivial():
    x = np.full(10, 2.0)
    assert survival(x, [1.0, 3.0, 0.0]).survival.tolist() == [1.0, 0.0, 1.0]
    with pytest.raises(InsufficientDataError):
        survival(np.array([]), [1.0])


def test_quantile_examples():
    assert quantile(np.full(7, 4.0), 0.3) == 4.0
    assert quantile(np.array([3.0, 1.0, 2.0]), 0.5) == 2.0
    with pytest.raises(ConfigError):
        quantile(np.array([1.0]), 1.0)


def test_tail_constant_of_exact_exponential_sample():
    g = 0.5
    x = generator(0, 3).exponential(1 / g, 2_000_000)
    est = empirical_tail_constant(x, g)
    assert abs(est.value - 1.0) <= 3 * est.stderr + 1e-3
    lo, hi = default_window(x)
    assert est.window == (lo, hi)


def test_tail_constant_needs_exceedances():
    x = generator(0, 3).exponential(1.0, 1000)
    with pytest.raises(InsufficientDataError):
        empirical_tail_constant(x, 1.0, window=(1.0, 50.0))


def test_tir_fcfs_against_itself(mm1):
    tr, fcfs = mm1
    curve = empirical_tir(fcfs, fcfs, [1.0, 10.0, 1e6])
    assert curve.tir[:2].tolist() == [0.0, 0.0]
    assert not curve.defined[2] and math.isnan(curve.tir[2])


def test_tir_pairing_enforced():
    a = generate_trace(0.8, EXP, 20_000, 1)
    b = generate_trace(0.8, EXP, 20_000, 2)
    with pytest.raises(PairingError):
        empirical_tir(run(a, PolicySpec.fcfs()), run(b, PolicySpec.fcfs()), [1.0])
    with pytest.raises(PairingError):
        empirical_tir(run(a, PolicySpec.fcfs(), warmup=0), run(a, PolicySpec.fcfs()), [1.0])


def test_boost_tir_positive_with_finite_errors(mm1):
    tr, fcfs = mm1
    boost = run(tr, PolicySpec.boost(ThetaOptimalBoost(0.2, EXP)))
    curve = empirical_tir(boost, fcfs, [2.0, 10.0, 30.0])
    assert np.all(curve.defined) and np.all(np.isfinite(curve.stderr))
    assert np.all(curve.tir - 2 * curve.stderr > 0)


def test_plateau_of_fcfs_against_itself_is_zero():
    tr = generate_trace(0.8, EXP, 1_000_000, 5)
    f = run(tr, PolicySpec.fcfs())
    est = tir_plateau(f, f, 0.2)
    assert est.value == 0.0


# crossing work

@pytest.mark.parametrize(
    "dist, make_boost, u",
    [
        (EXP, lambda g: ThetaOptimalBoost(g, EXP), math.inf),
        (EXP, lambda g: ConstantBoost(2.0), 3.0),
        (Uniform(0.0, 2.0), lambda g: ThetaOptimalBoost(g, Uniform(0.0, 2.0)), 3.0),
        (Uniform(0.0, 2.0), lambda g: ConstantBoost(2.0), math.inf),
    ],
)
def test_crossing_work_transform_matches_monte_carlo(dist, make_boost, u):
    lam = 0.8 / dist.mean
    g = float(solve_gamma(lam, dist))
    boost = make_boost(g)
    exact = crossing_work_transform(lam, dist, boost, g, u)
    mean, se = sample_crossing_work(lam, dist, boost, g, u, reps=100_000, seed=1)
    assert abs(mean - exact) <= 3 * se
