"""Job-size distributions and label-size models.

Every distribution exposes its moment generating function ``mgf``, the
derivative ``mgf_prime`` (that is ``E[S exp(theta S)]``), the leftmost MGF
singularity ``theta_star``, sampling, and ``expect`` for integrating an
arbitrary function against the law.  MGFs are closed form wherever one
exists; the bounded Lomax falls back to adaptive quadrature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy import integrate, optimize

from .errors import ConfigError, DomainError, IntegrationError, UnknownLabelError

__all__ = [
    "SizeDistribution",
    "Deterministic",
    "Exponential",
    "Uniform",
    "Hyperexponential",
    "BoundedLomax",
    "Empirical",
    "Discrete",
    "Mixture",
    "LabelSizeModel",
    "FullInformation",
    "Branch",
    "FiniteLabels",
    "sample",
    "mgf",
    "mgf_prime",
    "theta_star",
    "is_class_one",
    "conditional_mgf",
    "distribution_from_dict",
    "model_from_dict",
    "benchmark_distributions",
]

PROB_TOL = 1e-12
_QUAD_OPTS = dict(epsabs=1e-13, epsrel=1e-12, limit=2000)


def quad(func: Callable[[float], float], a: float, b: float) -> float:
    """Adaptive quadrature that refuses to return an untrustworthy value."""
    if not a < b:
        return 0.0
    val, err, info = integrate.quad(func, a, b, full_output=True, **_QUAD_OPTS)[:3]
    if not math.isfinite(val) or err > 1e-8 * max(1.0, abs(val)):
        raise IntegrationError(f"quadrature on [{a}, {b}] failed: value={val!r}, error={err!r}")
    return val


class SizeDistribution:
    """Base class for the law of a job size ``S > 0``."""

    kind: str = ""

    @property
    def theta_star(self) -> float:
        """Leftmost singularity of the MGF (``math.inf`` for bounded support)."""
        return math.inf

    @cached_property
    def mean(self) -> float:
        return self.expect(lambda s: s)

    @cached_property
    def variance(self) -> float:
        m = self.mean
        return self.expect(lambda s: (s - m) ** 2)

    def mgf(self, theta: float) -> float:
        raise NotImplementedError

    def mgf_prime(self, theta: float) -> float:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size: int | None = None):
        raise NotImplementedError

    def expect(self, func: Callable[[float], float], lo: float = -math.inf, hi: float = math.inf) -> float:
        """Return ``E[func(S); lo < S <= hi]``."""
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError

    def _check_prime_domain(self, theta: float) -> None:
        if theta >= self.theta_star:
            raise DomainError(f"E[S exp(theta S)] diverges for theta={theta} >= theta*={self.theta_star}")


@dataclass(frozen=True)
class Deterministic(SizeDistribution):
    value: float
    kind = "deterministic"

    def __post_init__(self):
        if not self.value > 0:
            raise ConfigError("deterministic size must be positive")

    @cached_property
    def mean(self) -> float:
        return float(self.value)

    def mgf(self, theta):
        return math.exp(theta * self.value)

    def mgf_prime(self, theta):
        return self.value * math.exp(theta * self.value)

    def sample(self, rng, size=None):
        if size is None:
            return float(self.value)
        return np.full(size, float(self.value))

    def expect(self, func, lo=-math.inf, hi=math.inf):
        return float(func(self.value)) if lo < self.value <= hi else 0.0

    def to_dict(self):
        return {"type": self.kind, "value": self.value}


@dataclass(frozen=True)
class Exponential(SizeDistribution):
    rate: float
    kind = "exponential"

    def __post_init__(self):
        if not self.rate > 0:
            raise ConfigError("exponential rate must be positive")

    @property
    def theta_star(self):
        return float(self.rate)

    @cached_property
    def mean(self):
        return 1.0 / self.rate

    @cached_property
    def variance(self):
        return 1.0 / self.rate**2

    def mgf(self, theta):
        if theta >= self.rate:
            return math.inf
        return self.rate / (self.rate - theta)

    def mgf_prime(self, theta):
        self._check_prime_domain(theta)
        return self.rate / (self.rate - theta) ** 2

    def sample(self, rng, size=None):
        return rng.exponential(1.0 / self.rate, size)

    def expect(self, func, lo=-math.inf, hi=math.inf):
        mu = self.rate
        a = max(lo, 0.0)
        # the density underflows to exactly zero past mu*s ~ 745
        b = min(hi, 700.0 / mu)
        return quad(lambda s: func(s) * mu * math.exp(-mu * s), a, b)

    def to_dict(self):
        return {"type": self.kind, "rate": self.rate}


@dataclass(frozen=True)
class Uniform(SizeDistribution):
    lo: float
    hi: float
    kind = "uniform"

    def __post_init__(self):
        if not (self.lo >= 0 and self.hi > self.lo):
            raise ConfigError("uniform needs 0 <= lo < hi")

    @cached_property
    def mean(self):
        return 0.5 * (self.lo + self.hi)

    @cached_property
    def variance(self):
        return (self.hi - self.lo) ** 2 / 12.0

    def _raw_moment(self, m: int) -> float:
        return (self.hi ** (m + 1) - self.lo ** (m + 1)) / ((m + 1) * (self.hi - self.lo))

    def mgf(self, theta):
        width = self.hi - self.lo
        x = theta * width
        if x == 0.0:
            return 1.0
        try:
            return math.exp(theta * self.lo) * math.expm1(x) / x
        except OverflowError:
            return math.inf

    def mgf_prime(self, theta):
        if abs(theta) * self.hi < 1.0:
            # series: sum_k theta^k / k! * E[S^(k+1)]
            total, term = 0.0, 1.0
            for k in range(40):
                total += term * self._raw_moment(k + 1)
                term *= theta / (k + 1)
            return total
        width = self.hi - self.lo

        def antiderivative(s):
            return math.exp(theta * s) * (s / theta - 1.0 / theta**2)

        return (antiderivative(self.hi) - antiderivative(self.lo)) / width

    def sample(self, rng, size=None):
        return rng.uniform(self.lo, self.hi, size)

    def expect(self, func, lo=-math.inf, hi=math.inf):
        density = 1.0 / (self.hi - self.lo)
        return quad(lambda s: func(s) * density, max(lo, self.lo), min(hi, self.hi))

    def to_dict(self):
        return {"type": self.kind, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class Hyperexponential(SizeDistribution):
    """Mixture of exponentials: with probability ``probs[k]`` the size is Exp(``rates[k]``)."""

    probs: tuple[float, ...]
    rates: tuple[float, ...]
    kind = "hyperexponential"

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if len(self.probs) != len(self.rates) or not self.probs:
            raise ConfigError("hyperexponential needs matching, nonempty probs and rates")
        if any(p <= 0 for p in self.probs) or any(r <= 0 for r in self.rates):
            raise ConfigError("hyperexponential probabilities and rates must be positive")
        if abs(sum(self.probs) - 1.0) > PROB_TOL:
            raise ConfigError(f"hyperexponential probabilities sum to {sum(self.probs)!r}, not 1")

    @property
    def theta_star(self):
        return min(self.rates)

    @cached_property
    def mean(self):
        return sum(p / r for p, r in zip(self.probs, self.rates))

    @cached_property
    def variance(self):
        second = sum(2 * p / r**2 for p, r in zip(self.probs, self.rates))
        return second - self.mean**2

    def mgf(self, theta):
        if theta >= self.theta_star:
            return math.inf
        return sum(p * r / (r - theta) for p, r in zip(self.probs, self.rates))

    def mgf_prime(self, theta):
        self._check_prime_domain(theta)
        return sum(p * r / (r - theta) ** 2 for p, r in zip(self.probs, self.rates))

    def sample(self, rng, size=None):
        if size is None:
            k = rng.choice(len(self.probs), p=self.probs)
            return rng.exponential(1.0 / self.rates[k])
        branch = rng.choice(len(self.probs), size=size, p=self.probs)
        scales = 1.0 / np.asarray(self.rates)
        return rng.exponential(1.0, size) * scales[branch]

    def expect(self, func, lo=-math.inf, hi=math.inf):
        return sum(p * Exponential(r).expect(func, lo, hi) for p, r in zip(self.probs, self.rates))

    def to_dict(self):
        return {"type": self.kind, "probs": list(self.probs), "rates": list(self.rates)}


@dataclass(frozen=True)
class BoundedLomax(SizeDistribution):
    """Lomax(shape, scale) conditioned on ``S <= bound``.

    Use :meth:`with_mean` to pick the scale that gives a target mean.
    """

    alpha: float
    scale: float
    bound: float
    kind = "bounded_lomax"

    def __post_init__(self):
        if not (self.alpha > 0 and self.scale > 0 and self.bound > 0):
            raise ConfigError("bounded lomax parameters must be positive")

    @classmethod
    def with_mean(cls, alpha: float, bound: float, mean: float = 1.0) -> "BoundedLomax":
        if not 0 < mean < bound / 2:
            raise ConfigError("a bounded lomax mean must lie in (0, bound/2)")

        def gap(log_scale):
            return cls(alpha, math.exp(log_scale), bound).mean - mean

        # the mean increases from 0 to bound/2 as the scale runs over (0, inf)
        log_scale = optimize.brentq(gap, -30.0, 30.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        return cls(alpha, math.exp(log_scale), bound)

    @cached_property
    def _mass(self) -> float:
        return -math.expm1(-self.alpha * math.log1p(self.bound / self.scale))

    def pdf(self, s: float) -> float:
        if not 0 <= s <= self.bound:
            return 0.0
        a, c = self.alpha, self.scale
        return a / c * (1.0 + s / c) ** (-a - 1.0) / self._mass

    def mgf(self, theta):
        return self.expect(lambda s: math.exp(theta * s))

    def mgf_prime(self, theta):
        return self.expect(lambda s: s * math.exp(theta * s))

    def sample(self, rng, size=None):
        u = rng.random(size)
        # inverse of the truncated CDF
        return self.scale * ((1.0 - u * self._mass) ** (-1.0 / self.alpha) - 1.0)

    def expect(self, func, lo=-math.inf, hi=math.inf):
        return quad(lambda s: func(s) * self.pdf(s), max(lo, 0.0), min(hi, self.bound))

    def to_dict(self):
        return {"type": self.kind, "alpha": self.alpha, "scale": self.scale, "bound": self.bound}


@dataclass(frozen=True)
class Discrete(SizeDistribution):
    """Finite support ``values`` with probabilities ``probs``."""

    values: tuple[float, ...]
    probs: tuple[float, ...]
    kind = "discrete"

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if len(self.values) != len(self.probs) or not self.values:
            raise ConfigError("discrete law needs matching, nonempty values and probs")
        if any(v <= 0 for v in self.values):
            raise ConfigError("job sizes must be positive")
        if any(p <= 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > PROB_TOL:
            raise ConfigError("discrete probabilities must be positive and sum to 1")

    @cached_property
    def mean(self):
        return float(np.dot(self.values, self.probs))

    def mgf(self, theta):
        with np.errstate(over="ignore"):
            return float(np.dot(self.probs, np.exp(theta * np.asarray(self.values))))

    def mgf_prime(self, theta):
        v = np.asarray(self.values)
        return float(np.dot(self.probs, v * np.exp(theta * v)))

    def sample(self, rng, size=None):
        return rng.choice(np.asarray(self.values), size=size, p=self.probs)

    def expect(self, func, lo=-math.inf, hi=math.inf):
        return float(sum(p * func(v) for v, p in zip(self.values, self.probs) if lo < v <= hi))

    def to_dict(self):
        return {"type": self.kind, "values": list(self.values), "probs": list(self.probs)}


@dataclass(frozen=True)
class Empirical(SizeDistribution):
    """Equal-weight law on a list of observed sizes."""

    samples: tuple[float, ...]
    kind = "empirical"

    def __post_init__(self):
        values = tuple(sorted(float(v) for v in self.samples))
        if not values or values[0] <= 0:
            raise ConfigError("empirical samples must be nonempty and positive")
        object.__setattr__(self, "samples", values)

    @cached_property
    def _array(self) -> np.ndarray:
        return np.asarray(self.samples)

    @cached_property
    def mean(self):
        return float(self._array.mean())

    def mgf(self, theta):
        with np.errstate(over="ignore"):
            return float(np.mean(np.exp(theta * self._array)))

    def mgf_prime(self, theta):
        return float(np.mean(self._array * np.exp(theta * self._array)))

    def sample(self, rng, size=None):
        return rng.choice(self._array, size=size)

    def expect(self, func, lo=-math.inf, hi=math.inf):
        sel = [v for v in self.samples if lo < v <= hi]
        return float(sum(func(v) for v in sel)) / len(self.samples)

    def to_dict(self):
        return {"type": self.kind, "samples": list(self.samples)}


@dataclass(frozen=True)
class Mixture(SizeDistribution):
    """Probability-weighted mixture of arbitrary component laws."""

    probs: tuple[float, ...]
    components: tuple[SizeDistribution, ...]
    kind = "mixture"

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        object.__setattr__(self, "components", tuple(self.components))
        if len(self.probs) != len(self.components) or not self.probs:
            raise ConfigError("mixture needs matching, nonempty probs and components")
        if any(p <= 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > PROB_TOL:
            raise ConfigError("mixture probabilities must be positive and sum to 1")

    @property
    def theta_star(self):
        return min(c.theta_star for c in self.components)

    @cached_property
    def mean(self):
        return sum(p * c.mean for p, c in zip(self.probs, self.components))

    def mgf(self, theta):
        return sum(p * c.mgf(theta) for p, c in zip(self.probs, self.components))

    def mgf_prime(self, theta):
        self._check_prime_domain(theta)
        return sum(p * c.mgf_prime(theta) for p, c in zip(self.probs, self.components))

    def sample(self, rng, size=None):
        if size is None:
            k = rng.choice(len(self.probs), p=self.probs)
            return self.components[k].sample(rng)
        branch = rng.choice(len(self.probs), size=size, p=self.probs)
        out = np.empty(size)
        for k, comp in enumerate(self.components):
            mask = branch == k
            out[mask] = comp.sample(rng, int(mask.sum()))
        return out

    def expect(self, func, lo=-math.inf, hi=math.inf):
        return sum(p * c.expect(func, lo, hi) for p, c in zip(self.probs, self.components))

    def to_dict(self):
        return {
            "type": self.kind,
            "probs": list(self.probs),
            "components": [c.to_dict() for c in self.components],
        }


# Module-level spellings of the per-distribution operations.

def sample(dist: SizeDistribution, rng: np.random.Generator, size: int | None = None):
    return dist.sample(rng, size)


def mgf(dist: SizeDistribution, theta: float) -> float:
    return dist.mgf(theta)


def mgf_prime(dist: SizeDistribution, theta: float) -> float:
    return dist.mgf_prime(theta)


def theta_star(dist: SizeDistribution) -> float:
    return dist.theta_star


def is_class_one(dist: SizeDistribution, blowup: float = 1e6) -> bool:
    """Check that the MGF is finite on (0, theta*) and diverges at a finite theta*.

    The divergence is probed just inside the singularity, at
    ``theta* (1 - 1e-9)``; bounded laws pass vacuously.
    """
    ts = dist.theta_star
    if not ts > 0:
        return False
    if math.isinf(ts):
        return True
    return dist.mgf(0.5 * ts) < math.inf and dist.mgf(ts * (1.0 - 1e-9)) >= blowup


# Label-size models.

class LabelSizeModel:
    """Joint law of a job's label ``L`` and size ``S``."""

    full_information: bool = False

    @property
    def marginal(self) -> SizeDistribution:
        raise NotImplementedError

    def conditional_mgf(self, label, theta: float) -> float:
        raise NotImplementedError

    def conditional_mean(self, label) -> float:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` i.i.d. ``(label, size)`` pairs, returned as two arrays."""
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True)
class FullInformation(LabelSizeModel):
    """Labels are the exact sizes (``L = S``)."""

    dist: SizeDistribution
    full_information = True

    @property
    def marginal(self):
        return self.dist

    def conditional_mgf(self, label, theta):
        if not label > 0:
            raise DomainError(f"a full-information label is a positive size, got {label!r}")
        try:
            return math.exp(theta * label)
        except OverflowError:
            return math.inf

    def conditional_mean(self, label):
        return float(label)

    def sample(self, rng, n):
        sizes = np.asarray(self.dist.sample(rng, n), dtype=float)
        return sizes.copy(), sizes

    def to_dict(self):
        return {"type": "full_information", "distribution": self.dist.to_dict()}


@dataclass(frozen=True)
class Branch:
    label: Any
    prob: float
    dist: SizeDistribution


@dataclass(frozen=True)
class FiniteLabels(LabelSizeModel):
    """Finitely many labels; a job with label ``l`` has size law ``branch(l).dist``."""

    branches: tuple[Branch, ...]
    _index: Mapping[Any, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        branches = tuple(self.branches)
        object.__setattr__(self, "branches", branches)
        if not branches:
            raise ConfigError("finite-label model needs at least one branch")
        if any(b.prob <= 0 for b in branches):
            raise ConfigError("label probabilities must be positive")
        total = sum(b.prob for b in branches)
        if abs(total - 1.0) > PROB_TOL:
            raise ConfigError(f"label probabilities sum to {total!r}, not 1")
        index = {b.label: i for i, b in enumerate(branches)}
        if len(index) != len(branches):
            raise ConfigError("duplicate label ids")
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_pairs(cls, items: Sequence[tuple[Any, float, SizeDistribution]]) -> "FiniteLabels":
        return cls(tuple(Branch(label, float(p), d) for label, p, d in items))

    @property
    def labels(self) -> list:
        return [b.label for b in self.branches]

    @property
    def probs(self) -> np.ndarray:
        return np.array([b.prob for b in self.branches])

    def branch(self, label) -> Branch:
        try:
            return self.branches[self._index[label]]
        except (KeyError, TypeError):
            raise UnknownLabelError(label) from None

    @cached_property
    def marginal(self):
        return Mixture(tuple(b.prob for b in self.branches), tuple(b.dist for b in self.branches))

    def conditional_mgf(self, label, theta):
        return self.branch(label).dist.mgf(theta)

    def conditional_mean(self, label):
        return self.branch(label).dist.mean

    def sample(self, rng, n):
        which = rng.choice(len(self.branches), size=n, p=self.probs)
        sizes = np.empty(n)
        for k, b in enumerate(self.branches):
            mask = which == k
            sizes[mask] = b.dist.sample(rng, int(mask.sum()))
        ids = np.array(self.labels)
        return ids[which], sizes

    def to_dict(self):
        return {
            "type": "finite_labels",
            "branches": [{"label": b.label, "prob": b.prob, "distribution": b.dist.to_dict()} for b in self.branches],
        }


def conditional_mgf(model: LabelSizeModel, label, theta: float) -> float:
    return model.conditional_mgf(label, theta)


# Config (de)serialization.

def distribution_from_dict(spec: Mapping[str, Any]) -> SizeDistribution:
    """Build a distribution from its JSON form, e.g. ``{"type": "exponential", "rate": 1}``."""
    try:
        kind = spec["type"]
    except (KeyError, TypeError):
        raise ConfigError("distribution needs a 'type' field") from None
    try:
        if kind == "deterministic":
            return Deterministic(float(spec["value"]))
        if kind == "exponential":
            if "mean" in spec:
                return Exponential(1.0 / float(spec["mean"]))
            return Exponential(float(spec["rate"]))
        if kind == "uniform":
            return Uniform(float(spec["lo"]), float(spec["hi"]))
        if kind == "hyperexponential":
            return Hyperexponential(tuple(spec["probs"]), tuple(spec["rates"]))
        if kind == "bounded_lomax":
            if "scale" in spec:
                return BoundedLomax(float(spec["alpha"]), float(spec["scale"]), float(spec["bound"]))
            return BoundedLomax.with_mean(float(spec["alpha"]), float(spec["bound"]), float(spec.get("mean", 1.0)))
        if kind == "discrete":
            return Discrete(tuple(spec["values"]), tuple(spec["probs"]))
        if kind == "empirical":
            return Empirical(tuple(spec["samples"]))
        if kind == "mixture":
            return Mixture(tuple(spec["probs"]), tuple(distribution_from_dict(c) for c in spec["components"]))
    except KeyError as exc:
        raise ConfigError(f"distribution {kind!r} is missing parameter {exc.args[0]!r}") from None
    raise ConfigError(f"unknown distribution type {kind!r}")


def model_from_dict(spec: Mapping[str, Any]) -> LabelSizeModel:
    """Build a label-size model; a bare distribution means full information."""
    kind = spec.get("type") if isinstance(spec, Mapping) else None
    if kind == "full_information":
        return FullInformation(distribution_from_dict(spec["distribution"]))
    if kind == "finite_labels":
        try:
            return FiniteLabels(
                tuple(
                    Branch(b["label"], float(b["prob"]), distribution_from_dict(b["distribution"]))
                    for b in spec["branches"]
                )
            )
        except KeyError as exc:
            raise ConfigError(f"finite-label branch is missing {exc.args[0]!r}") from None
    return FullInformation(distribution_from_dict(spec))


def benchmark_distributions() -> dict[str, SizeDistribution]:
    """The four mean-1 size laws used throughout the experiments."""
    return {
        "uniform": Uniform(0.0, 2.0),
        "exponential": Exponential(1.0),
        "hyperexponential": Hyperexponential((0.8, 0.2), (2.0, 1.0 / 3.0)),
        "bounded_lomax": BoundedLomax.with_mean(2.0, 4.0, 1.0),
    }
