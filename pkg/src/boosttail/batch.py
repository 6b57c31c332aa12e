"""Batch scheduling with an exponential cost on lateness.

A batch instance is a finite set of jobs, each with an arrival time and
either a known size or a label with a size distribution.  All jobs are
available at time 0 and served back to back; job ``i`` finishing at ``d_i``
costs ``exp(theta (d_i - a_i))``.  Serving in ascending
``a_i - b_theta(payload)`` order minimises the total cost, which the
brute-force enumerator here certifies on small instances.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .analytics import optimal_boost
from .dist import Discrete, FiniteLabels, LabelSizeModel
from .errors import ConfigError, DomainError, SizeGuardError

__all__ = [
    "BatchInstance",
    "ThetaCost",
    "BusyPeriodIndex",
    "theta_cost",
    "expected_theta_cost",
    "boost_order",
    "brute_force_min",
    "fcfs_departures",
    "busy_periods",
    "random_instance",
    "random_label_instance",
    "verify_instance",
    "MAX_BRUTE_FORCE",
]

MAX_BRUTE_FORCE = 9
COST_RTOL = 1e-12


@dataclass(frozen=True)
class BatchInstance:
    """Arrival times plus sizes (``model is None``) or labels of ``model``."""

    arrivals: tuple[float, ...]
    payloads: tuple
    model: LabelSizeModel | None = None

    def __post_init__(self):
        object.__setattr__(self, "arrivals", tuple(float(a) for a in self.arrivals))
        object.__setattr__(self, "payloads", tuple(self.payloads))
        if not self.arrivals:
            raise ConfigError("a batch instance needs at least one job")
        if len(self.arrivals) != len(self.payloads):
            raise ConfigError("arrivals and payloads differ in length")
        if any(a < 0 for a in self.arrivals):
            raise ConfigError("arrival times must be nonnegative")
        if self.model is None:
            object.__setattr__(self, "payloads", tuple(float(s) for s in self.payloads))
            if any(not s > 0 for s in self.payloads):
                raise ConfigError("job sizes must be positive")
        elif not self.model.full_information:
            for label in self.payloads:
                self.model.branch(label)

    def __len__(self):
        return len(self.arrivals)

    @property
    def has_labels(self) -> bool:
        return self.model is not None and not self.model.full_information

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"arrivals": list(self.arrivals)}
        if self.has_labels:
            out["labels"] = list(self.payloads)
            out["model"] = self.model.to_dict()
        else:
            out["sizes"] = list(self.payloads)
        return out


@dataclass(frozen=True)
class ThetaCost:
    theta: float
    value: float
    order: tuple[int, ...]

    def __float__(self):
        return self.value


def _check_order(n: int, order) -> np.ndarray:
    order = np.asarray(order, dtype=int)
    if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
        raise ConfigError(f"{list(order)} is not a permutation of 0..{n - 1}")
    return order


def _log_mgfs(instance: BatchInstance, theta: float) -> np.ndarray:
    """Per-job ``log E[exp(theta S_j)]`` (just ``theta s_j`` for known sizes)."""
    if not instance.has_labels:
        return theta * np.asarray(instance.payloads)
    values = np.array([instance.model.conditional_mgf(l, theta) for l in instance.payloads])
    if np.any(np.isinf(values)):
        raise DomainError(f"a branch MGF diverges at theta={theta}")
    return np.log(values)


def theta_cost(instance: BatchInstance, order, theta: float) -> ThetaCost:
    """Total ``sum_i exp(theta (d_i - a_i))`` when serving in ``order`` from time 0."""
    if instance.has_labels:
        raise ConfigError("theta_cost needs known sizes; use expected_theta_cost for labels")
    order = _check_order(len(instance), order)
    sizes = np.asarray(instance.payloads)[order]
    lateness = np.cumsum(sizes) - np.asarray(instance.arrivals)[order]
    return ThetaCost(theta, float(np.exp(theta * lateness).sum()), tuple(order.tolist()))


def expected_theta_cost(instance: BatchInstance, order, theta: float) -> ThetaCost:
    """Expected theta-cost with independent sizes drawn from each label's law.

    By independence the ``k``-th job served contributes
    ``exp(-theta a_k) prod_{j <= k} M_j(theta)``.
    """
    order = _check_order(len(instance), order)
    log_m = _log_mgfs(instance, theta)[order]
    terms = np.cumsum(log_m) - theta * np.asarray(instance.arrivals)[order]
    return ThetaCost(theta, float(np.exp(terms).sum()), tuple(order.tolist()))


def boost_order(instance: BatchInstance, theta: float) -> list[int]:
    """Serve in ascending ``a_i - b_theta(payload_i)``; ties by arrival, then index."""
    if not theta > 0:
        raise ConfigError("theta must be positive")
    arrivals = np.asarray(instance.arrivals)
    if instance.has_labels:
        boosts = np.array([optimal_boost(instance.model, l, theta) for l in instance.payloads])
    else:
        boosts = -np.log(-np.expm1(-theta * np.asarray(instance.payloads))) / theta
    keys = arrivals - boosts
    index = np.arange(len(instance))
    return np.lexsort((index, arrivals, keys)).tolist()


def _all_costs(instance: BatchInstance, theta: float) -> tuple[np.ndarray, np.ndarray]:
    n = len(instance)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int16)
    log_m = _log_mgfs(instance, theta)
    arrivals = np.asarray(instance.arrivals)
    exponents = np.cumsum(log_m[perms], axis=1) - theta * arrivals[perms]
    return perms, np.exp(exponents).sum(axis=1)


def brute_force_min(instance: BatchInstance, theta: float) -> tuple[float, list[tuple[int, ...]]]:
    """Exhaustive minimum of the (expected) theta-cost over every order.

    Returns the minimum and all orders whose cost is within a relative
    ``1e-12`` of it (summation order alone can move costs by that much).
    """
    if len(instance) > MAX_BRUTE_FORCE:
        raise SizeGuardError(f"brute force is limited to {MAX_BRUTE_FORCE} jobs, got {len(instance)}")
    perms, costs = _all_costs(instance, theta)
    best = float(costs.min())
    winners = perms[costs <= best * (1 + COST_RTOL)]
    return best, [tuple(int(i) for i in w) for w in winners]


def _cost(instance, order, theta):
    return expected_theta_cost(instance, order, theta) if instance.has_labels else theta_cost(instance, order, theta)


def verify_instance(instance: BatchInstance, theta: float, claimed_order=None) -> dict[str, Any]:
    """Compare an order (default: the boost order) against the brute-force optimum."""
    order = boost_order(instance, theta) if claimed_order is None else list(claimed_order)
    cost = _cost(instance, order, theta).value
    best, _ = brute_force_min(instance, theta)
    gap = cost - best
    return {
        "n": len(instance),
        "theta": theta,
        "order": list(order),
        "cost": cost,
        "optimum": best,
        "gap": gap,
        "pass": bool(gap <= COST_RTOL * best),
    }


def random_instance(rng: np.random.Generator, n: int, arrival_span: float = 3.0,
                    size_scale: float = 1.0) -> BatchInstance:
    """Arrivals uniform on ``[0, arrival_span]``, sizes exponential."""
    arrivals = np.sort(rng.uniform(0.0, arrival_span, n))
    sizes = rng.exponential(size_scale, n) + 1e-9
    return BatchInstance(tuple(arrivals), tuple(sizes))


def random_label_instance(rng: np.random.Generator, n: int, n_labels: int = 3,
                          support: int = 3, arrival_span: float = 3.0) -> BatchInstance:
    """Label instance whose branch laws are discrete with small supports."""
    branches = []
    label_probs = rng.dirichlet(np.ones(n_labels))
    for k in range(n_labels):
        values = rng.uniform(0.05, 2.0, support)
        probs = rng.dirichlet(np.ones(support))
        branches.append((k, float(label_probs[k]), Discrete(tuple(values), tuple(probs))))
    # renormalise the label probabilities exactly
    total = math.fsum(p for _, p, _ in branches)
    model = FiniteLabels.from_pairs([(k, p / total, d) for k, p, d in branches])
    arrivals = np.sort(rng.uniform(0.0, arrival_span, n))
    labels = rng.integers(0, n_labels, n)
    return BatchInstance(tuple(arrivals), tuple(int(l) for l in labels), model)


# ---------------------------------------------------------------------------
# Busy periods of a work-conserving single server

def fcfs_departures(arrivals, sizes) -> np.ndarray:
    """FCFS departure times from the Lindley recursion ``d_i = max(a_i, d_{i-1}) + s_i``."""
    a = np.asarray(arrivals, dtype=float).tolist()
    s = np.asarray(sizes, dtype=float).tolist()
    out = [0.0] * len(a)
    d = -math.inf
    for i, (ai, si) in enumerate(zip(a, s)):
        d = (ai if ai > d else d) + si
        out[i] = d
    return np.asarray(out)


@dataclass(frozen=True)
class BusyPeriodIndex:
    """Busy periods as contiguous runs ``first[k]:stop[k]`` of arrival-ordered jobs."""

    starts: np.ndarray
    ends: np.ndarray
    first: np.ndarray
    stop: np.ndarray

    def __len__(self):
        return len(self.starts)

    def members(self, k: int) -> range:
        return range(int(self.first[k]), int(self.stop[k]))

    def period_of(self) -> np.ndarray:
        """Period number of every job."""
        n = int(self.stop[-1]) if len(self) else 0
        marks = np.zeros(n, dtype=np.int64)
        marks[self.first[1:]] = 1
        return np.cumsum(marks)


def busy_periods(trace=None, *, arrivals=None, sizes=None, departures=None) -> BusyPeriodIndex:
    """Split a trace into busy periods.

    A new period begins with any arrival strictly after the previous FCFS
    departure; an arrival exactly at that instant extends the period.
    """
    if trace is not None:
        arrivals, sizes = trace.arrivals, trace.sizes
    a = np.asarray(arrivals, dtype=float)
    if departures is None:
        departures = fcfs_departures(a, sizes)
    d = np.asarray(departures)
    n = len(a)
    if n == 0:
        empty = np.zeros(0)
        return BusyPeriodIndex(empty, empty, empty.astype(int), empty.astype(int))
    new = np.ones(n, dtype=bool)
    new[1:] = a[1:] > d[:-1]
    first = np.flatnonzero(new)
    stop = np.append(first[1:], n)
    return BusyPeriodIndex(a[first], d[stop - 1], first, stop)
