import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boosttail.dist import (
    Branch,
    BoundedLomax,
    Deterministic,
    Discrete,
    Empirical,
    Exponential,
    FiniteLabels,
    FullInformation,
    Hyperexponential,
    Mixture,
    Uniform,
    benchmark_distributions,
    distribution_from_dict,
    is_class_one,
    model_from_dict,
)
from boosttail.errors import ConfigError, DomainError, UnknownLabelError
from boosttail.sim import generator

BENCH = benchmark_distributions()
ALL = dict(
    BENCH,
    deterministic=Deterministic(2.0),
    empirical=Empirical((0.5, 1.0, 1.5, 3.0)),
    discrete=Discrete((0.2, 1.0, 2.5), (0.3, 0.5, 0.2)),
    mixture=Mixture((0.4, 0.6), (Exponential(2.0), Uniform(0.5, 1.5))),
)


def rng(seed=0):
    return generator(seed, 1)


# sampling

def test_deterministic_samples_constant():
    d = Deterministic(2.0)
    assert d.sample(rng()) == 2.0
    assert np.all(d.sample(rng(), 100) == 2.0)


def test_uniform_samples_in_range_with_mean_one():
    x = Uniform(0.0, 2.0).sample(rng(), 1_000_000)
    assert x.min() > 0 and x.max() < 2
    se = math.sqrt(1 / 3 / x.size)
    assert abs(x.mean() - 1.0) < 3 * se


def test_hyperexponential_benchmark_mean():
    d = BENCH["hyperexponential"]
    assert d.mean == pytest.approx(0.8 * 0.5 + 0.2 * 3.0, rel=1e-15)
    x = d.sample(rng(), 1_000_000)
    assert abs(x.mean() - 1.0) < 4 * math.sqrt(d.variance / x.size)


@pytest.mark.parametrize("name", sorted(ALL))
def test_sample_mean_matches_analytic_mean(name):
    d = ALL[name]
    x = d.sample(rng(7), 1_000_000)
    assert np.all(x > 0)
    se = math.sqrt(max(d.variance, 1e-300) / x.size)
    assert abs(x.mean() - d.mean) <= 4 * se + 1e-12


def test_sampling_is_reproducible():
    d = BENCH["bounded_lomax"]
    assert np.array_equal(d.sample(rng(3), 1000), d.sample(rng(3), 1000))


# mgf

def test_exponential_mgf_closed_form():
    assert Exponential(1.0).mgf(0.2) == pytest.approx(1.25, rel=1e-15)
    assert Exponential(1.0).mgf(1.0) == math.inf


@pytest.mark.parametrize("name", sorted(ALL))
def test_mgf_at_zero_is_one(name):
    assert ALL[name].mgf(0.0) == pytest.approx(1.0, rel=1e-12)


def test_bounded_lomax_mgf_matches_monte_carlo():
    d = BENCH["bounded_lomax"]
    x = np.exp(0.3 * d.sample(rng(11), 10_000_000))
    assert abs(d.mgf(0.3) - x.mean()) < 3 * x.std() / math.sqrt(x.size)


def test_bounded_lomax_scale_solved_for_unit_mean():
    d = BENCH["bounded_lomax"]
    assert d.mean == pytest.approx(1.0, abs=1e-12)
    # with shape 2 and bound 4 the truncated mean is 1 exactly at scale 2
    assert d.scale == pytest.approx(2.0, rel=1e-10)


@pytest.mark.parametrize("name", sorted(ALL))
def test_mgf_nondecreasing_and_convex(name):
    d = ALL[name]
    top = min(d.theta_star * 0.95, 1.0)
    grid = np.linspace(0, top, 20)
    vals = np.array([d.mgf(t) for t in grid])
    assert np.all(np.diff(vals) >= -1e-12)
    assert np.all(np.diff(vals, 2) >= -1e-9)


def test_mgf_prime_closed_forms():
    assert Exponential(1.0).mgf_prime(0.2) == pytest.approx(1.5625, rel=1e-15)
    assert Deterministic(3.0).mgf_prime(0.1) == pytest.approx(3.0 * math.exp(0.3), rel=1e-15)


@pytest.mark.parametrize("name", sorted(ALL))
def test_mgf_prime_matches_central_difference(name):
    d = ALL[name]
    theta = 0.25 if math.isinf(d.theta_star) else 0.25 * d.theta_star
    h = 1e-6
    fd = (d.mgf(theta + h) - d.mgf(theta - h)) / (2 * h)
    assert d.mgf_prime(theta) == pytest.approx(fd, rel=1e-6)


def test_uniform_mgf_prime_small_theta_series():
    d = Uniform(0.0, 2.0)
    for theta in (1e-9, 1e-4, 6e-3, 0.3, 0.49, 0.51, 2.0):
        exact = d.expect(lambda s: s * math.exp(theta * s))
        assert d.mgf_prime(theta) == pytest.approx(exact, rel=1e-12)


def test_mgf_prime_past_singularity_is_domain_error():
    with pytest.raises(DomainError):
        Exponential(1.0).mgf_prime(1.0)
    with pytest.raises(DomainError):
        BENCH["hyperexponential"].mgf_prime(0.5)


# theta star and class I

def test_theta_star_values():
    assert BENCH["hyperexponential"].theta_star == pytest.approx(1 / 3)
    assert Uniform(0, 2).theta_star == math.inf
    assert Exponential(1.0).theta_star == 1.0
    assert BENCH["bounded_lomax"].theta_star == math.inf
    assert Empirical((1.0, 2.0)).theta_star == math.inf


@pytest.mark.parametrize("name", sorted(BENCH))
def test_benchmarks_are_class_one(name):
    d = BENCH[name]
    assert d.theta_star > 0
    assert is_class_one(d)
    if math.isfinite(d.theta_star):
        assert d.mgf(d.theta_star * (1 - 1e-9)) >= 1e6


# validation

@pytest.mark.parametrize(
    "build",
    [
        lambda: Hyperexponential((0.5, 0.4), (1.0, 2.0)),
        lambda: Uniform(1.0, 1.0),
        lambda: Uniform(-1.0, 1.0),
        lambda: Exponential(0.0),
        lambda: BoundedLomax(2.0, 1.0, 0.0),
        lambda: Deterministic(0.0),
        lambda: Empirical(()),
    ],
)
def test_invalid_parameters_rejected(build):
    with pytest.raises(ConfigError):
        build()


def test_hyperexponential_probability_tolerance():
    Hyperexponential((0.5, 0.5 + 5e-13), (1.0, 2.0))
    with pytest.raises(ConfigError):
        Hyperexponential((0.5, 0.5 + 1e-11), (1.0, 2.0))


# label-size models

def two_class():
    return FiniteLabels.from_pairs([(1, 0.5, Exponential(3.0)), (2, 0.5, Exponential(0.6))])


def test_full_information_conditional_mgf():
    m = FullInformation(Exponential(1.0))
    assert m.conditional_mgf(1.0, 0.2) == pytest.approx(math.exp(0.2))


def test_finite_labels_conditional_mgf_delegates():
    m = two_class()
    assert m.conditional_mgf(1, 0.2) == Exponential(3.0).mgf(0.2)


def test_unknown_label():
    with pytest.raises(UnknownLabelError):
        two_class().conditional_mgf(3, 0.1)


@settings(max_examples=30, deadline=None)
@given(
    probs=st.lists(st.floats(0.05, 1.0), min_size=1, max_size=5),
    rates=st.lists(st.floats(0.5, 5.0), min_size=5, max_size=5),
    frac=st.floats(0.0, 0.99),
)
def test_tower_rule_for_mixtures(probs, rates, frac):
    total = math.fsum(probs)
    p = [x / total for x in probs]
    p[-1] = 1.0 - math.fsum(p[:-1])
    m = FiniteLabels(tuple(Branch(i, pi, Exponential(r)) for i, (pi, r) in enumerate(zip(p, rates))))
    theta = frac * min(rates[: len(p)])
    lhs = sum(pi * m.conditional_mgf(i, theta) for i, pi in enumerate(p))
    assert lhs == pytest.approx(m.marginal.mgf(theta), rel=1e-10)


def test_finite_label_probabilities_validated():
    with pytest.raises(ConfigError):
        FiniteLabels.from_pairs([(1, 0.5, Exponential(1.0)), (2, 0.4, Exponential(1.0))])
    with pytest.raises(ConfigError):
        FiniteLabels.from_pairs([(1, 0.5, Exponential(1.0)), (1, 0.5, Exponential(1.0))])


def test_finite_label_sampling_uses_branches():
    m = FiniteLabels.from_pairs([("a", 0.3, Deterministic(1.0)), ("b", 0.7, Deterministic(5.0))])
    labels, sizes = m.sample(rng(), 10_000)
    assert set(labels.tolist()) == {"a", "b"}
    assert np.all(sizes[labels == "a"] == 1.0) and np.all(sizes[labels == "b"] == 5.0)
    assert abs((labels == "a").mean() - 0.3) < 4 * math.sqrt(0.21 / 10_000)


def test_config_round_trip():
    for d in ALL.values():
        assert distribution_from_dict(d.to_dict()) == d
    m = two_class()
    assert model_from_dict(m.to_dict()) == m
    assert model_from_dict({"type": "exponential", "mean": 2.0}).marginal == Exponential(0.5)


def test_config_rejects_unknown_type():
    with pytest.raises(ConfigError):
        distribution_from_dict({"type": "pareto"})
    with pytest.raises(ConfigError):
        distribution_from_dict({"type": "exponential"})
