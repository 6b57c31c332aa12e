"""Closed-form tail asymptotics for FCFS, Boost and Nudge-M in the M/G/1.

Response times of the policies treated here decay like ``C exp(-gamma t)``
with a common decay rate ``gamma``; policies differ only through the tail
constant ``C``.  This module computes ``gamma``, the workload constant
``C_W``, the constants of FCFS, Boost with an arbitrary boost function and
the optimal Boost policy, plus the two-class comparison with Nudge-M and
the finite-label optimisation problem.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .dist import FiniteLabels, FullInformation, LabelSizeModel, SizeDistribution
from .errors import (
    ConfigError,
    ConvergenceError,
    DegeneracyError,
    DomainError,
    InadmissibleBoostError,
    InconsistentParametersError,
    InfiniteBoostError,
    InstabilityError,
    IntegrationError,
    NoRootError,
    UnknownLabelError,
)

__all__ = [
    "DecayRate",
    "TailConstant",
    "BoostFunction",
    "ZeroBoost",
    "ConstantBoost",
    "TableBoost",
    "CurveBoost",
    "ThetaOptimalBoost",
    "solve_gamma",
    "work_tail_constant",
    "fcfs_tail_constant",
    "optimal_boost",
    "admissibility",
    "boost_tail_constant",
    "optimal_tail_constant",
    "crossing_work_transform",
    "asymptotic_tir",
    "nudge_m_ratio",
    "best_nudge_m",
    "two_label_boost_ratio",
    "finite_label_constant",
    "finite_label_gradient",
    "finite_label_optimum",
    "minimize_finite_label",
    "TwoClassView",
    "two_class_view",
    "TailReport",
    "tail_report",
]


@dataclass(frozen=True)
class DecayRate:
    """Decay rate ``gamma`` of the response-time tail at arrival rate ``lam``."""

    gamma: float
    lam: float
    rho: float

    def __float__(self):
        return float(self.gamma)


@dataclass(frozen=True)
class TailConstant:
    value: float
    policy: str
    gamma: float

    def __float__(self):
        return float(self.value)


def _as_model(model) -> LabelSizeModel:
    if isinstance(model, LabelSizeModel):
        return model
    if isinstance(model, SizeDistribution):
        return FullInformation(model)
    raise TypeError(f"expected a size distribution or label-size model, got {type(model).__name__}")


def _as_dist(model) -> SizeDistribution:
    return model.marginal if isinstance(model, LabelSizeModel) else model


# ---------------------------------------------------------------------------
# Decay rate and work constant

def solve_gamma(lam: float, dist) -> DecayRate:
    """Least positive root of ``theta = lam (E[exp(theta S)] - 1)``.

    Parameters
    ----------
    lam : float
        Poisson arrival rate.
    dist : SizeDistribution or LabelSizeModel
        Job size law (the marginal is used for a label model).

    Returns
    -------
    DecayRate

    Raises
    ------
    InstabilityError
        If the load ``lam E[S]`` is at least 1.
    NoRootError
        If ``g(theta) = lam (M(theta) - 1) - theta`` does not change sign
        before the MGF singularity.
    """
    dist = _as_dist(dist)
    if not lam > 0:
        raise ConfigError("arrival rate must be positive")
    rho = lam * dist.mean
    if rho >= 1:
        raise InstabilityError(f"load rho={rho:.6g} is not below 1")

    def g(theta):
        return lam * (dist.mgf(theta) - 1.0) - theta

    ts = dist.theta_star
    cap = ts * (1.0 - 1e-9) if math.isfinite(ts) else math.inf
    # g(0) = 0 and g'(0) = rho - 1 < 0, so the first sign change is the least root
    lo, hi = 0.0, 1e-6
    while True:
        if hi >= cap:
            hi = cap
        if g(hi) > 0:
            break
        if hi == cap:
            raise NoRootError(f"no sign change of the decay-rate equation below theta*={ts}")
        lo = hi
        if 2 * hi < cap:
            hi *= 2
        else:
            hi = 0.5 * (hi + cap) if cap - hi > 1e-15 * cap else cap
        if math.isinf(hi) or hi > 1e300:
            raise NoRootError("decay-rate bracket ran off to infinity")

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if g(mid) > 0:
            hi = mid
        else:
            lo = mid
    root = 0.5 * (lo + hi)
    # a couple of guarded Newton steps
    for _ in range(3):
        slope = lam * dist.mgf_prime(root) - 1.0
        if slope <= 0:
            break
        step = g(root) / slope
        candidate = root - step
        if not lo <= candidate <= hi or abs(g(candidate)) > abs(g(root)):
            break
        root = candidate
    return DecayRate(root, lam, rho)


def work_tail_constant(lam: float, dist, gamma) -> TailConstant:
    """Tail constant ``C_W`` of the stationary workload.

    It is the residue of the Pollaczek-Khinchine transform at its pole,
    ``(1 - rho) / (lam M'(gamma) - 1)``.
    """
    dist = _as_dist(dist)
    g = float(gamma)
    rho = lam * dist.mean
    denom = lam * dist.mgf_prime(g) - 1.0
    if not denom > 0:
        raise DegeneracyError(f"lam M'(gamma) - 1 = {denom!r} is not positive")
    return TailConstant((1.0 - rho) / denom, "work", g)


def fcfs_tail_constant(c_w, dist, gamma) -> TailConstant:
    """FCFS response-time tail constant ``C_W E[exp(gamma S)]``."""
    g = float(gamma)
    return TailConstant(float(c_w) * _as_dist(dist).mgf(g), "fcfs", g)


# ---------------------------------------------------------------------------
# Boost functions

class BoostFunction:
    """Map from a label to a nonnegative boost.

    ``b(label)`` evaluates one label and ``b.many(labels)`` a whole array.
    """

    name = "boost"

    def __call__(self, label) -> float:
        raise NotImplementedError

    def many(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        return np.array([self(l) for l in labels.tolist()], dtype=float)

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True)
class ZeroBoost(BoostFunction):
    name = "zero"

    def __call__(self, label):
        return 0.0

    def many(self, labels):
        return np.zeros(np.shape(labels))

    def to_dict(self):
        return {"type": "zero"}


@dataclass(frozen=True)
class ConstantBoost(BoostFunction):
    value: float
    name = "constant"

    def __post_init__(self):
        if not self.value >= 0:
            raise ConfigError("boosts must be nonnegative")

    def __call__(self, label):
        return float(self.value)

    def many(self, labels):
        return np.full(np.shape(labels), float(self.value))

    def to_dict(self):
        return {"type": "constant", "value": self.value}


@dataclass(frozen=True)
class TableBoost(BoostFunction):
    """Explicit boost per label id."""

    table: Mapping[Any, float]
    name = "table"

    def __post_init__(self):
        table = dict(self.table)
        if any(not v >= 0 for v in table.values()):
            raise ConfigError("boosts must be nonnegative")
        object.__setattr__(self, "table", table)

    def __hash__(self):
        return hash(tuple(sorted(self.table.items(), key=repr)))

    def __call__(self, label):
        try:
            return float(self.table[label])
        except KeyError:
            raise UnknownLabelError(label) from None

    def to_dict(self):
        return {"type": "table", "table": [[k, v] for k, v in self.table.items()]}


@dataclass(frozen=True)
class CurveBoost(BoostFunction):
    """User-supplied size-to-boost curve for full-information models."""

    func: Callable[[float], float]
    name = "curve"

    def __call__(self, label):
        value = float(self.func(label))
        if not value >= 0:
            raise DomainError(f"boost curve returned {value!r} at {label!r}")
        return value

    def to_dict(self):
        raise ConfigError("a user curve cannot be serialized")


@dataclass(frozen=True)
class ThetaOptimalBoost(BoostFunction):
    """The boost ``(1/theta) log(M / (M - 1))`` with ``M = E[exp(theta S) | L]``."""

    theta: float
    model: LabelSizeModel
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)
    name = "theta_optimal"

    def __post_init__(self):
        if not self.theta > 0:
            raise ConfigError("theta must be positive")
        object.__setattr__(self, "model", _as_model(self.model))

    def __call__(self, label):
        if self.model.full_information:
            return optimal_boost(self.model, label, self.theta)
        try:
            return self._cache[label]
        except KeyError:
            value = self._cache[label] = optimal_boost(self.model, label, self.theta)
            return value

    def many(self, labels):
        if self.model.full_information:
            s = np.asarray(labels, dtype=float)
            if np.any(s <= 0):
                raise DomainError("full-information labels must be positive sizes")
            return -np.log(-np.expm1(-self.theta * s)) / self.theta
        return super().many(labels)

    def to_dict(self):
        return {"type": "theta_optimal", "theta": self.theta}


def optimal_boost(model, label, theta: float) -> float:
    """The theta-optimal boost of one label.

    Raises
    ------
    InfiniteBoostError
        If the conditional MGF of the label is infinite at ``theta``.
    """
    model = _as_model(model)
    if not theta > 0:
        raise ConfigError("theta must be positive")
    if model.full_information:
        s = float(label)
        if not s > 0:
            raise DomainError(f"a full-information label is a positive size, got {label!r}")
        # log(M/(M-1)) with M = exp(theta s), written to avoid cancellation
        return -math.log(-math.expm1(-theta * s)) / theta
    m = model.conditional_mgf(label, theta)
    if math.isinf(m):
        raise InfiniteBoostError(f"E[exp(theta S) | L={label!r}] is infinite at theta={theta}")
    if not m > 1:
        raise DomainError(f"conditional MGF {m!r} of label {label!r} is not above 1")
    return math.log1p(1.0 / (m - 1.0)) / theta


# ---------------------------------------------------------------------------
# Boost tail constants

def _label_expectation(model: LabelSizeModel, per_label: Callable[[Any, SizeDistribution], float]) -> float:
    return sum(b.prob * per_label(b.label, b.dist) for b in model.branches)


def _weighted_boost(model: LabelSizeModel, boost: BoostFunction, theta: float, cap: float = math.inf) -> float:
    """``E[min(b(L), cap) (exp(theta S) - 1)]``, possibly ``inf``."""
    if model.full_information:
        dist = model.marginal

        def integrand(s):
            b = min(boost(s), cap)
            return b * math.expm1(theta * s) if b > 0 else 0.0

        try:
            return dist.expect(integrand)
        except (IntegrationError, OverflowError):
            return math.inf

    def per_label(label, dist):
        b = min(boost(label), cap)
        if b == 0:
            return 0.0
        return b * (dist.mgf(theta) - 1.0)

    return _label_expectation(model, per_label)


def admissibility(model, boost: BoostFunction, gamma) -> float:
    """``E[b(L) (exp(gamma S) - 1)]``; ``inf`` means the boost is too large."""
    return _weighted_boost(_as_model(model), boost, float(gamma))


def _discounted_mgf(model: LabelSizeModel, boost: BoostFunction, gamma: float) -> float:
    """``E[exp(gamma (S - b(L)))]``."""
    if model.full_information:
        return model.marginal.expect(lambda s: math.exp(gamma * (s - boost(s))))
    return _label_expectation(model, lambda label, dist: dist.mgf(gamma) * math.exp(-gamma * boost(label)))


def boost_tail_constant(lam: float, model, boost: BoostFunction, gamma, c_w) -> TailConstant:
    """Tail constant of Boost (and Cheat) with boost function ``boost``.

    ``C = C_W E[exp(gamma (S - b(L)))] exp(lam E[b(L) (exp(gamma S) - 1)])``.
    """
    model = _as_model(model)
    g = float(gamma)
    excess = admissibility(model, boost, g)
    if math.isinf(excess):
        raise InadmissibleBoostError("E[b(L)(exp(gamma S) - 1)] is infinite")
    value = float(c_w) * _discounted_mgf(model, boost, g) * math.exp(lam * excess)
    return TailConstant(value, f"boost:{boost.name}", g)


def optimal_tail_constant(lam: float, model, gamma, c_w) -> TailConstant:
    """Tail constant of gamma-Boost, ``C_W (M(gamma) - 1) exp(lam E[b_gamma(L)(exp(gamma S) - 1)])``."""
    model = _as_model(model)
    g = float(gamma)
    excess = admissibility(model, ThetaOptimalBoost(g, model), g)
    value = float(c_w) * (model.marginal.mgf(g) - 1.0) * math.exp(lam * excess)
    return TailConstant(value, "gamma_boost", g)


def crossing_work_transform(lam: float, model, boost: BoostFunction, theta: float, u: float = math.inf) -> float:
    """Transform ``E[exp(theta V(u))]`` of the crossing work over a window ``u``.

    Returns ``exp(lam E[(exp(theta S) - 1) min(b(L), u)])``; a divergent inner
    expectation gives ``inf``.
    """
    if u < 0:
        raise DomainError("window length must be nonnegative")
    if u == 0:
        return 1.0
    inner = _weighted_boost(_as_model(model), boost, theta, cap=u)
    if math.isinf(inner):
        return math.inf
    return math.exp(lam * inner)


def asymptotic_tir(c_policy, c_fcfs) -> float:
    """Asymptotic tail improvement ratio ``1 - C_policy / C_FCFS``."""
    c_policy, c_fcfs = float(c_policy), float(c_fcfs)
    if not (c_policy > 0 and c_fcfs > 0):
        raise DomainError("tail constants must be positive")
    return 1.0 - c_policy / c_fcfs


# ---------------------------------------------------------------------------
# Two classes: Nudge-M against Boost

def _check_two_class(p1, s1, s2):
    if not 0 < p1 < 1:
        raise ConfigError("p1 must lie in (0, 1)")
    if not (s1 > 1 and s2 > 1):
        raise ConfigError("class MGFs at gamma must exceed 1")


def nudge_m_ratio(p1: float, s1: float, s2: float, k: int) -> float:
    """``C_NudgeM / C_FCFS`` for two classes with MGFs ``s1 <= s2`` at gamma.

    Parameters
    ----------
    p1 : float
        Probability of the small class.
    s1, s2 : float
        ``E[exp(gamma S) | class]`` for the small and large class.
    k : int
        Nudge-M window: a small job may pass large jobs among the ``k``
        most recent arrivals.
    """
    _check_two_class(p1, s1, s2)
    if s1 > s2:
        raise ConfigError("class 1 must be the small class (s1 <= s2)")
    if int(k) != k or k < 0:
        raise ConfigError("K must be a nonnegative integer")
    p2 = 1.0 - p1
    s = p1 * s1 + p2 * s2
    head = p1 * s1 + p2
    return (p1 * s1 / s) * (head / s) ** k + (p2 * s2 / s) * head**k


def best_nudge_m(p1: float, s1: float, s2: float, k_max: int = 30) -> tuple[int, float]:
    """Scan ``K = 0..k_max`` and return the minimising ``(K, ratio)``."""
    ratios = [nudge_m_ratio(p1, s1, s2, k) for k in range(k_max + 1)]
    k = int(np.argmin(ratios))
    return k, ratios[k]


def two_label_boost_ratio(p1: float, s1: float, s2: float, delta: float, lam: float, gamma) -> float:
    """``C_Boost / C_FCFS`` for two labels whose boosts differ by ``delta = b1 - b2``."""
    _check_two_class(p1, s1, s2)
    if delta < 0:
        raise ConfigError("delta must be nonnegative")
    g = float(gamma)
    p2 = 1.0 - p1
    s = p1 * s1 + p2 * s2
    return (p1 * s1 / s * math.exp(-g * delta) + p2 * s2 / s) * math.exp(lam * p1 * delta * (s1 - 1.0))


@dataclass(frozen=True)
class TwoClassView:
    """Small/large split of a model: ``p1 = P(small)`` and per-class MGFs at gamma."""

    p1: float
    s1: float
    s2: float
    threshold: float


def two_class_view(model, gamma, threshold: float | None = None) -> TwoClassView:
    """Collapse a model into a small and a large class.

    A label is small when ``E[S | L] <= threshold`` (default ``E[S]``); with
    full information that is ``S <= threshold``.
    """
    model = _as_model(model)
    g = float(gamma)
    tau = model.marginal.mean if threshold is None else float(threshold)
    if model.full_information:
        dist = model.marginal
        p1 = dist.expect(lambda s: 1.0, hi=tau)
        m1 = dist.expect(lambda s: math.exp(g * s), hi=tau)
        m2 = dist.expect(lambda s: math.exp(g * s), lo=tau)
        p2 = 1.0 - p1
    else:
        p1 = m1 = m2 = 0.0
        for b in model.branches:
            if b.dist.mean <= tau:
                p1 += b.prob
                m1 += b.prob * b.dist.mgf(g)
            else:
                m2 += b.prob * b.dist.mgf(g)
        p2 = 1.0 - p1
    if not (p1 > 0 and p2 > 0):
        raise DegeneracyError(f"threshold {tau} leaves one class empty")
    return TwoClassView(p1, m1 / p1, m2 / p2, tau)


# ---------------------------------------------------------------------------
# Finite labels: direct optimisation of the boost vector

def _finite_label_terms(lam, gamma, p, s, b):
    g = float(gamma)
    p, s, b = (np.asarray(x, dtype=float) for x in (p, s, b))
    if not (p.shape == s.shape == b.shape) or p.ndim != 1:
        raise ConfigError("p, s and b must be vectors of equal length")
    if abs(p.sum() - 1.0) > 1e-9:
        raise InconsistentParametersError(f"label probabilities sum to {p.sum()!r}")
    drift = lam * np.dot(p, s - 1.0)
    if abs(drift - g) > 1e-9 * max(1.0, g):
        raise InconsistentParametersError(
            f"lam sum p (s - 1) = {drift!r} differs from gamma = {g!r}")
    slope = lam * p * (s - 1.0)
    with np.errstate(over="ignore"):
        weights = p * s * np.exp(-g * b + np.dot(slope, b))
    return g, p, s, b, slope, weights


def finite_label_constant(lam, gamma, c_w, p, s, b) -> float:
    """Boost tail constant as a function of the boost vector ``b``.

    Parameters
    ----------
    lam : float
        Arrival rate.
    gamma : float
        Decay rate; must satisfy ``lam sum p_i (s_i - 1) = gamma``.
    c_w : float
        Workload tail constant.
    p, s, b : array_like
        Label probabilities, label MGFs at gamma, and boosts.
    """
    _, _, _, _, _, weights = _finite_label_terms(lam, gamma, p, s, b)
    return float(c_w) * float(weights.sum())


def finite_label_gradient(lam, gamma, c_w, p, s, b) -> np.ndarray:
    """Gradient of :func:`finite_label_constant` with respect to ``b``."""
    g, _, _, _, slope, weights = _finite_label_terms(lam, gamma, p, s, b)
    return float(c_w) * (slope * weights.sum() - g * weights)


def finite_label_optimum(gamma, s) -> np.ndarray:
    """Closed-form minimiser ``b_i = (1/gamma) log(s_i / (s_i - 1))``."""
    s = np.asarray(s, dtype=float)
    if np.any(s <= 1):
        raise DomainError("label MGFs at gamma must exceed 1")
    return np.log1p(1.0 / (s - 1.0)) / float(gamma)


def minimize_finite_label(lam, gamma, c_w, p, s, b0, *, tol: float = 1e-12,
                          max_iter: int = 100_000, full_output: bool = False):
    """Minimise the finite-label tail constant by projected gradient descent.

    The objective is unchanged when every boost moves by the same amount, so
    the minimisers form a line.  After descent the iterate is shifted along
    that line to the point where ``sum p_i s_i exp(-gamma b_i) = gamma / lam``,
    which singles out the minimiser with the fewest wasted units of boost.

    Parameters
    ----------
    lam, gamma, c_w, p, s
        As in :func:`finite_label_constant`.
    b0 : array_like
        Starting boosts; negative entries are projected to zero.
    tol : float
        Stop when the projected gradient step of ``log C`` has sup-norm
        below ``tol``.
    max_iter : int
        Iteration budget.
    full_output : bool
        Also return the number of iterations taken.

    Raises
    ------
    ConvergenceError
        If the budget runs out first.
    """
    g, p, s, b, _, _ = _finite_label_terms(lam, gamma, p, s, b0)
    b = np.maximum(b, 0.0)

    def objective(x):
        return math.log(finite_label_constant(lam, g, 1.0, p, s, x))

    def gradient(x):
        return finite_label_gradient(lam, g, 1.0, p, s, x) / finite_label_constant(lam, g, 1.0, p, s, x)

    f, grad = objective(b), gradient(b)
    step = 1.0
    iterations = 0
    while True:
        pg = np.maximum(b - grad, 0.0) - b
        if np.max(np.abs(pg)) < tol:
            break
        if iterations >= max_iter:
            raise ConvergenceError(f"no convergence after {max_iter} iterations")
        iterations += 1
        # Armijo backtracking along the projection arc.  Once the decrease
        # drops below rounding noise in f, fall back on the slope at the trial
        # point: a step that has not overshot the minimum is accepted.
        t = step
        while True:
            trial = np.maximum(b - t * grad, 0.0)
            f_trial = objective(trial)
            if f_trial <= f + 1e-4 * np.dot(grad, trial - b) or t < 1e-30:
                grad_trial = gradient(trial)
                break
            if abs(f_trial - f) <= 1e-13 * max(1.0, abs(f)):
                grad_trial = gradient(trial)
                if np.dot(grad_trial, trial - b) <= 0:
                    break
            t *= 0.5
        ds, dg = trial - b, grad_trial - grad
        curvature = float(np.dot(ds, dg))
        # Barzilai-Borwein guess for the next step
        step = float(np.dot(ds, ds)) / curvature if curvature > 0 else 2 * t
        step = min(max(step, 1e-12), 1e12)
        stalled = np.array_equal(trial, b)
        b, f, grad = trial, f_trial, grad_trial
        if stalled:
            pg = np.maximum(b - grad, 0.0) - b
            if np.max(np.abs(pg)) < 1e-8:
                break
            raise ConvergenceError("line search stalled before convergence")

    # move along the flat direction to the canonical minimiser
    shift = (math.log(lam / g) + float(logsumexp(np.log(p * s) - g * b))) / g
    b_opt = b + shift
    if np.any(b_opt < 0):
        b_opt = b_opt - min(b_opt.min(), 0.0)
    return (b_opt, iterations) if full_output else b_opt


# ---------------------------------------------------------------------------
# Summary

@dataclass(frozen=True)
class TailReport:
    """Analytic summary of one load point."""

    decay: DecayRate
    c_w: float
    c_fcfs: float
    c_star: float
    tir_star: float
    extra: dict = field(default_factory=dict)

    def as_rows(self) -> list[tuple[str, float, float]]:
        rows = [("fcfs", self.c_fcfs, 0.0), ("gamma_boost", self.c_star, self.tir_star)]
        rows += [(name, c, asymptotic_tir(c, self.c_fcfs)) for name, c in self.extra.items()]
        return rows


def tail_report(lam: float, model) -> TailReport:
    """Compute ``gamma``, ``C_W``, ``C_FCFS`` and ``C*`` for one arrival rate."""
    model = _as_model(model)
    decay = solve_gamma(lam, model)
    c_w = work_tail_constant(lam, model, decay)
    c_fcfs = fcfs_tail_constant(c_w, model, decay)
    c_star = optimal_tail_constant(lam, model, decay, c_w)
    return TailReport(decay, c_w.value, c_fcfs.value, c_star.value, asymptotic_tir(c_star, c_fcfs))
