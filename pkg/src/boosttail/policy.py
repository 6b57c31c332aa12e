"""Scheduling decisions for FCFS, Boost, Nudge variants and SRPT.

The functions here act on :class:`Job` records one decision at a time and
drive the reference event engine in :mod:`boosttail.sim`.  The fast array
kernels there implement the same rules and are checked against this module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .analytics import BoostFunction, ZeroBoost
from .dist import LabelSizeModel
from .errors import ConfigError, InfiniteBoostError

__all__ = ["Job", "PolicySpec", "assign_boost", "select_next", "nudge_insert", "is_small"]

KINDS = ("fcfs", "boost", "nudge", "nudge_k", "nudge_m", "srpt")
NUDGE_KINDS = ("nudge", "nudge_k", "nudge_m")


@dataclass
class Job:
    """One job as seen by the scheduler.

    ``label`` is what the scheduler observes (the size itself under full
    information); ``observed_size`` overrides it for the boost when a noisy
    size estimate is configured.  Service always consumes ``size``.
    """

    id: int
    arrival: float
    size: float
    label: Any = None
    boost: float = 0.0
    remaining: float = math.nan
    size_class: str = "small"
    observed_size: float | None = None
    passed: bool = False

    def __post_init__(self):
        if math.isnan(self.remaining):
            self.remaining = self.size
        if self.label is None:
            self.label = self.size

    @property
    def boosted_arrival(self) -> float:
        return self.arrival - self.boost


@dataclass(frozen=True)
class PolicySpec:
    """A scheduling policy and its parameters.

    Build instances with the class methods, e.g. ``PolicySpec.boost(b)`` or
    ``PolicySpec.nudge_m(k=5)``.  A Nudge threshold of ``None`` means the
    mean job size of the model being simulated.
    """

    kind: str
    boost_fn: BoostFunction = field(default_factory=ZeroBoost)
    preemptive: bool = False
    threshold: float | None = None
    k: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown policy {self.kind!r}")
        if self.kind in NUDGE_KINDS and (int(self.k) != self.k or self.k < 1):
            raise ConfigError("Nudge K must be an integer >= 1")
        if self.kind == "nudge" and self.k != 1:
            raise ConfigError("plain Nudge has K = 1; use nudge_k or nudge_m")

    @classmethod
    def fcfs(cls):
        return cls("fcfs")

    @classmethod
    def boost(cls, boost_fn: BoostFunction, preemptive: bool = False):
        return cls("boost", boost_fn=boost_fn, preemptive=preemptive)

    @classmethod
    def nudge(cls, threshold: float | None = None):
        return cls("nudge", threshold=threshold)

    @classmethod
    def nudge_k(cls, k: int, threshold: float | None = None):
        return cls("nudge_k", threshold=threshold, k=k)

    @classmethod
    def nudge_m(cls, k: int, threshold: float | None = None):
        return cls("nudge_m", threshold=threshold, k=k)

    @classmethod
    def srpt(cls):
        return cls("srpt", preemptive=True)

    @property
    def is_nudge(self) -> bool:
        return self.kind in NUDGE_KINDS

    @property
    def is_preemptive(self) -> bool:
        return self.kind == "srpt" or (self.kind == "boost" and self.preemptive)

    @property
    def tag(self) -> str:
        if self.kind == "boost":
            return f"boost-{self.boost_fn.name}" + ("-preemptive" if self.preemptive else "")
        if self.kind in ("nudge_k", "nudge_m"):
            return f"{self.kind}-{self.k}"
        return self.kind

    def resolve_threshold(self, model: LabelSizeModel | None) -> float:
        if self.threshold is not None:
            return float(self.threshold)
        if model is None:
            raise ConfigError("a Nudge threshold is needed when no model is given")
        return model.marginal.mean


def is_small(label, threshold: float, model: LabelSizeModel | None = None) -> bool:
    """Small/large split: conditional mean size of the label at most ``threshold``."""
    if model is None or model.full_information:
        return float(label) <= threshold
    return model.conditional_mean(label) <= threshold


def assign_boost(job: Job, spec: PolicySpec) -> Job:
    """Set ``job.boost`` for ``spec``: ``b(label)`` for Boost, zero otherwise."""
    if spec.kind != "boost":
        job.boost = 0.0
        return job
    seen = job.observed_size if job.observed_size is not None else job.label
    value = spec.boost_fn(seen)
    if math.isinf(value):
        raise InfiniteBoostError(f"job {job.id} would get an infinite boost")
    job.boost = value
    return job


def _key(spec: PolicySpec, job: Job):
    if spec.kind == "boost":
        return (job.boosted_arrival, job.arrival, job.id)
    if spec.kind == "srpt":
        return (job.remaining, job.arrival, job.id)
    return (job.arrival, job.id)


def select_next(spec: PolicySpec, waiting: Sequence[Job], now: float, in_service: Job | None = None):
    """Pick the job to serve at a decision epoch.

    Parameters
    ----------
    spec : PolicySpec
    waiting : sequence of Job
        Jobs present but not in service.  For the Nudge family this must be
        the queue in service order, as maintained by :func:`nudge_insert`.
    now : float
        Current time (unused by the static rules; kept for the interface).
    in_service : Job, optional
        Job currently holding the server.

    Returns
    -------
    int or None
        Id of the job that should hold the server, or ``None`` to idle.
    """
    if in_service is not None and not spec.is_preemptive:
        return in_service.id
    if not waiting:
        return None if in_service is None else in_service.id
    if spec.is_nudge:
        best = waiting[0]
    else:
        best = min(waiting, key=lambda j: _key(spec, j))
    if in_service is not None and not _key(spec, best) < _key(spec, in_service):
        return in_service.id
    return best.id


def nudge_insert(spec: PolicySpec, queue: list[Job], job: Job) -> list[Job]:
    """Insert an arriving job into a Nudge-family waiting queue.

    A large job joins the back.  A small job scans from the back and passes
    consecutive eligible large jobs, at most ``spec.k`` of them, stopping at
    the first small or ineligible job.  Under Nudge and Nudge-K a large job
    is eligible only if it has never been passed; under Nudge-M it is
    eligible if it is among the ``k`` most recent arrivals.
    """
    if job.size_class != "small":
        queue.append(job)
        return queue
    pos = len(queue)
    passes = 0
    while pos > 0 and passes < spec.k:
        ahead = queue[pos - 1]
        if ahead.size_class == "small":
            break
        if spec.kind == "nudge_m":
            eligible = ahead.id >= job.id - spec.k
        else:
            eligible = not ahead.passed
        if not eligible:
            break
        pos -= 1
        passes += 1
    if spec.kind != "nudge_m":
        for passed in queue[pos:]:
            passed.passed = True
    queue.insert(pos, job)
    return queue
