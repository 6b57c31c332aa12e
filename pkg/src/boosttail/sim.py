"""M/G/1 simulation: traces, policy runs, the cheating replay, and tail statistics.

Policy runs come in two engines.  The default ``"fast"`` engine uses
specialised array/heap kernels per policy family; the ``"reference"``
engine is a plain event-driven loop built on :mod:`boosttail.policy` and
exists to cross-check the fast kernels on small traces.

Randomness comes from counter-based Philox generators keyed by
``(seed, stream)``: stream 0 draws interarrival times, stream 1 labels and
sizes, stream 2 size-estimate noise, stream 3 anything else (e.g. the
crossing-work sampler).
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .analytics import BoostFunction, ZeroBoost
from .batch import busy_periods, fcfs_departures
from .dist import FullInformation, LabelSizeModel, SizeDistribution
from .errors import (
    ConfigError,
    InfiniteBoostError,
    InsufficientDataError,
    PairingError,
)
from .policy import Job, PolicySpec, assign_boost, nudge_insert, select_next

__all__ = [
    "STREAM_ARRIVALS",
    "STREAM_SIZES",
    "STREAM_NOISE",
    "STREAM_AUX",
    "generator",
    "ArrivalTrace",
    "ResponseSample",
    "generate_trace",
    "run",
    "replay_cheat",
    "default_warmup",
    "SurvivalCurve",
    "TIRCurve",
    "TailEstimate",
    "survival",
    "empirical_tir",
    "empirical_tail_constant",
    "tir_plateau",
    "quantile",
    "default_window",
    "sample_crossing_work",
]

STREAM_ARRIVALS, STREAM_SIZES, STREAM_NOISE, STREAM_AUX = range(4)


def generator(seed: int, stream: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(stream),))))


def _as_model(model):
    return FullInformation(model) if isinstance(model, SizeDistribution) else model


@dataclass(eq=False)
class ArrivalTrace:
    """A realised arrival sequence.

    ``labels`` holds what the scheduler observes: the label under a
    finite-label model, the (possibly noisy) size estimate under full
    information.  ``sizes`` are the true service requirements.
    """

    arrivals: np.ndarray
    sizes: np.ndarray
    labels: np.ndarray
    lam: float = math.nan
    model: LabelSizeModel | None = None
    seed: int | None = None
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.arrivals = np.asarray(self.arrivals, dtype=float)
        self.sizes = np.asarray(self.sizes, dtype=float)
        self.labels = np.asarray(self.labels)
        n = len(self.arrivals)
        if n == 0:
            raise ConfigError("a trace needs at least one job")
        if len(self.sizes) != n or len(self.labels) != n:
            raise ConfigError("arrivals, sizes and labels differ in length")
        if np.any(np.diff(self.arrivals) < 0):
            raise ConfigError("arrivals must be sorted")
        if np.any(self.sizes <= 0):
            raise ConfigError("job sizes must be positive")

    @classmethod
    def from_jobs(cls, pairs: Sequence[tuple[float, float]], labels=None, model=None) -> "ArrivalTrace":
        """Hand-built trace from ``(arrival, size)`` pairs."""
        a = [p[0] for p in pairs]
        s = [p[1] for p in pairs]
        return cls(np.asarray(a), np.asarray(s), np.asarray(s if labels is None else labels), model=model)

    @property
    def n(self) -> int:
        return len(self.arrivals)

    def __len__(self):
        return self.n

    def jobs(self) -> list[Job]:
        return [
            Job(i, float(a), float(s), label=l)
            for i, (a, s, l) in enumerate(zip(self.arrivals, self.sizes, self.labels.tolist()))
        ]

    def same_as(self, other: "ArrivalTrace") -> bool:
        return self is other or (
            self.n == other.n
            and np.array_equal(self.arrivals, other.arrivals)
            and np.array_equal(self.sizes, other.sizes)
        )


def generate_trace(lam: float, model, n: int, seed: int, noise_sigma: float = 0.0) -> ArrivalTrace:
    """Draw ``n`` Poisson(``lam``) arrivals with i.i.d. label/size pairs.

    With ``noise_sigma > 0`` (full information only) the scheduler sees
    ``size * exp(N(0, noise_sigma^2))`` instead of the size.
    """
    model = _as_model(model)
    if n <= 0:
        raise ConfigError("a trace needs at least one job")
    if not lam > 0:
        raise ConfigError("arrival rate must be positive")
    gaps = generator(seed, STREAM_ARRIVALS).exponential(1.0 / lam, n)
    labels, sizes = model.sample(generator(seed, STREAM_SIZES), n)
    if noise_sigma:
        if not model.full_information:
            raise ConfigError("size-estimate noise applies to full-information models only")
        noise = generator(seed, STREAM_NOISE).normal(0.0, noise_sigma, n)
        labels = sizes * np.exp(noise)
    return ArrivalTrace(np.cumsum(gaps), sizes, labels, lam, model, seed, noise_sigma)


def default_warmup(n: int) -> int:
    """Jobs discarded as warm-up: 1% (at least 10^4), but never more than a tenth of the run."""
    return min(max(math.ceil(0.01 * n), 10_000), n // 10)


@dataclass(eq=False)
class ResponseSample:
    """Departure and response times of every job of one run."""

    trace: ArrivalTrace
    policy: str
    departures: np.ndarray
    warmup: int = 0

    @property
    def responses(self) -> np.ndarray:
        return self.departures - self.trace.arrivals

    @property
    def kept(self) -> np.ndarray:
        """Responses after the warm-up cutoff."""
        return self.responses[self.warmup:]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.trace.n)


# ---------------------------------------------------------------------------
# Engines

def _boosts(trace: ArrivalTrace, boost_fn: BoostFunction) -> np.ndarray:
    try:
        b = np.asarray(boost_fn.many(trace.labels), dtype=float)
    except InfiniteBoostError as exc:
        raise ConfigError(f"boost function is not admissible for this trace: {exc}") from None
    if np.any(~np.isfinite(b)) or np.any(b < 0):
        raise ConfigError("boosts must be finite and nonnegative for every job")
    return b


def _small_mask(trace: ArrivalTrace, spec: PolicySpec) -> np.ndarray:
    tau = spec.resolve_threshold(trace.model)
    model = trace.model
    if model is None or model.full_information:
        return trace.labels.astype(float) <= tau
    lookup = {l: model.conditional_mean(l) <= tau for l in model.labels}
    return np.array([lookup[l] for l in trace.labels.tolist()], dtype=bool)


def _nonpreemptive_priority(a: list, s: list, keys: list) -> list:
    """Nonpreemptive service in ascending ``(key, index)`` among present jobs."""
    n = len(a)
    d = [0.0] * n
    heap: list = []
    push, pop = heapq.heappush, heapq.heappop
    t = -math.inf
    i = 0
    while i < n or heap:
        if not heap:
            if a[i] > t:
                t = a[i]
        while i < n and a[i] <= t:
            push(heap, (keys[i], i))
            i += 1
        _, j = pop(heap)
        t = t + s[j]
        d[j] = t
    return d


def _preemptive_priority(a: list, s: list, keys: list | None) -> list:
    """Preemptive-resume service; ``keys=None`` means shortest remaining work first."""
    n = len(a)
    d = [0.0] * n
    rem = list(s)
    srpt = keys is None
    heap: list = []
    push, pop = heapq.heappush, heapq.heappop
    t = -math.inf
    i = 0
    cur = -1
    done = 0
    while done < n:
        if cur < 0:
            if not heap:
                if a[i] > t:
                    t = a[i]
                while i < n and a[i] <= t:
                    push(heap, ((s[i] if srpt else keys[i]), i))
                    i += 1
            cur = pop(heap)[1]
        finish = t + rem[cur]
        nxt = a[i] if i < n else math.inf
        if finish <= nxt:
            t = finish
            rem[cur] = 0.0
            d[cur] = t
            cur = -1
            done += 1
            while i < n and a[i] <= t:
                push(heap, ((s[i] if srpt else keys[i]), i))
                i += 1
        else:
            rem[cur] -= nxt - t
            t = nxt
            if srpt:
                new_key, cur_key = (s[i], i), (rem[cur], cur)
            else:
                new_key, cur_key = (keys[i], i), (keys[cur], cur)
            if new_key < cur_key:
                push(heap, cur_key)
                cur = i
            else:
                push(heap, new_key)
            i += 1
    return d


def _nudge(a: list, s: list, small: list, kind: str, k: int) -> list:
    """Nonpreemptive Nudge family over job indices (see :func:`policy.nudge_insert`)."""
    n = len(a)
    d = [0.0] * n
    passed = bytearray(n)
    queue: list = []
    head = 0  # queue[head:] is the live queue
    t = -math.inf
    i = 0
    by_window = kind == "nudge_m"

    def insert(j):
        if not small[j]:
            queue.append(j)
            return
        pos = len(queue)
        passes = 0
        while pos > head and passes < k:
            ahead = queue[pos - 1]
            if small[ahead]:
                break
            if by_window:
                if ahead < j - k:
                    break
            elif passed[ahead]:
                break
            pos -= 1
            passes += 1
        if not by_window:
            for q in range(pos, len(queue)):
                passed[queue[q]] = 1
        queue.insert(pos, j)

    while i < n or head < len(queue):
        if head == len(queue):
            if a[i] > t:
                t = a[i]
        while i < n and a[i] <= t:
            insert(i)
            i += 1
        j = queue[head]
        head += 1
        if head > 4096 and head * 2 > len(queue):
            del queue[:head]
            head = 0
        t = t + s[j]
        d[j] = t
    return d


def _run_fast(trace: ArrivalTrace, spec: PolicySpec) -> np.ndarray:
    a = trace.arrivals
    if spec.kind == "fcfs":
        return fcfs_departures(a, trace.sizes)
    al, sl = a.tolist(), trace.sizes.tolist()
    if spec.kind == "boost":
        keys = (a - _boosts(trace, spec.boost_fn)).tolist()
        if spec.preemptive:
            return np.asarray(_preemptive_priority(al, sl, keys))
        return np.asarray(_nonpreemptive_priority(al, sl, keys))
    if spec.kind == "srpt":
        return np.asarray(_preemptive_priority(al, sl, None))
    small = _small_mask(trace, spec).tolist()
    return np.asarray(_nudge(al, sl, small, spec.kind, spec.k))


def _run_reference(trace: ArrivalTrace, spec: PolicySpec) -> np.ndarray:
    jobs = trace.jobs()
    small = _small_mask(trace, spec) if spec.is_nudge else None
    if spec.kind == "boost":
        boosts = _boosts(trace, spec.boost_fn)
    for job in jobs:
        if spec.kind == "boost":
            job.boost = float(boosts[job.id])
        else:
            assign_boost(job, spec)
        if small is not None:
            job.size_class = "small" if small[job.id] else "large"
    departures = np.full(len(jobs), np.nan)
    events: list = []
    seq = 0
    for job in jobs:
        heapq.heappush(events, (job.arrival, seq, "arrival", job.id, 0))
        seq += 1
    version = [0] * len(jobs)
    waiting: list[Job] = []
    in_service: Job | None = None
    started = 0.0
    while events:
        now = events[0][0]
        if in_service is not None:
            in_service.remaining -= now - started
            started = now
        while events and events[0][0] == now:
            _, _, kind, jid, ver = heapq.heappop(events)
            if kind == "completion":
                if ver != version[jid]:
                    continue
                job = jobs[jid]
                assert in_service is job and abs(job.remaining) < 1e-9 * max(1.0, job.size)
                job.remaining = 0.0
                departures[jid] = now
                in_service = None
            else:
                job = jobs[jid]
                if spec.is_nudge:
                    nudge_insert(spec, waiting, job)
                else:
                    waiting.append(job)
        chosen = select_next(spec, waiting, now, in_service)
        if chosen is None or (in_service is not None and chosen == in_service.id):
            continue
        if in_service is not None:
            version[in_service.id] += 1
            waiting.append(in_service)
        pos = next(p for p, j in enumerate(waiting) if j.id == chosen)
        in_service = waiting.pop(pos)
        started = now
        heapq.heappush(events, (now + in_service.remaining, seq, "completion", chosen, version[chosen]))
        seq += 1
    return departures


def run(trace: ArrivalTrace, spec: PolicySpec, *, engine: str = "fast", warmup: int | None = None) -> ResponseSample:
    """Simulate ``spec`` on ``trace``.

    Parameters
    ----------
    trace : ArrivalTrace
    spec : PolicySpec
    engine : {"fast", "reference"}
        ``"reference"`` is the slow event-driven engine used for testing.
    warmup : int, optional
        Number of leading jobs to drop from statistics; defaults to
        :func:`default_warmup`.

    Notes
    -----
    An arrival at exactly the instant the server frees up is present for
    the next scheduling decision.
    """
    if engine == "fast":
        d = _run_fast(trace, spec)
    elif engine == "reference":
        d = _run_reference(trace, spec)
    else:
        raise ConfigError(f"unknown engine {engine!r}")
    return ResponseSample(trace, spec.tag, d, default_warmup(trace.n) if warmup is None else warmup)


def replay_cheat(trace: ArrivalTrace, boost_fn: BoostFunction, *, warmup: int | None = None) -> ResponseSample:
    """Offline replay of the cheating system.

    Every job is released at the start of its busy period; each busy period
    is served back to back in ascending ``(boosted arrival, arrival, id)``.
    Responses can be smaller than sizes, or negative.
    """
    periods = busy_periods(trace)
    boosted = trace.arrivals - _boosts(trace, boost_fn)
    pid = periods.period_of()
    idx = np.arange(trace.n)
    order = np.lexsort((idx, trace.arrivals, boosted, pid))
    done_work = np.cumsum(trace.sizes[order])
    before = np.concatenate(([0.0], done_work))[periods.first]
    departures = np.empty(trace.n)
    departures[order] = periods.starts[pid[order]] + (done_work - before[pid[order]])
    tag = f"cheat-{boost_fn.name}"
    return ResponseSample(trace, tag, departures, default_warmup(trace.n) if warmup is None else warmup)


# ---------------------------------------------------------------------------
# Statistics

@dataclass(frozen=True)
class SurvivalCurve:
    t: np.ndarray
    survival: np.ndarray
    stderr: np.ndarray
    count: int


@dataclass(frozen=True)
class TIRCurve:
    t: np.ndarray
    tir: np.ndarray
    stderr: np.ndarray
    defined: np.ndarray


@dataclass(frozen=True)
class TailEstimate:
    value: float
    stderr: float
    window: tuple[float, float]

    def __float__(self):
        return self.value

    def interval(self, z: float = 2.0) -> tuple[float, float]:
        return self.value - z * self.stderr, self.value + z * self.stderr


def _kept(sample) -> np.ndarray:
    x = sample.kept if isinstance(sample, ResponseSample) else np.asarray(sample, dtype=float)
    if x.size == 0:
        raise InsufficientDataError("no responses left after the warm-up cutoff")
    return x


def survival(sample, t_grid) -> SurvivalCurve:
    """Empirical ``P(T > t)`` on ``t_grid`` with binomial standard errors."""
    x = np.sort(_kept(sample))
    t = np.asarray(t_grid, dtype=float)
    m = x.size
    p = (m - np.searchsorted(x, t, side="right")) / m
    return SurvivalCurve(t, p, np.sqrt(p * (1 - p) / m), m)


def _block_exceedances(x: np.ndarray, t: np.ndarray, blocks: int) -> tuple[np.ndarray, np.ndarray]:
    """Exceedance counts per contiguous block and grid point, plus block sizes."""
    blocks = max(2, min(blocks, x.size))
    edges = np.linspace(0, x.size, blocks + 1).astype(int)
    counts = np.empty((blocks, t.size))
    for b in range(blocks):
        seg = np.sort(x[edges[b]:edges[b + 1]])
        counts[b] = seg.size - np.searchsorted(seg, t, side="right")
    return counts, np.diff(edges).astype(float)


def _jackknife(stat, *block_arrays) -> tuple[float, float]:
    """Delete-one-block jackknife of ``stat(*totals)``."""
    totals = [arr.sum(axis=0) for arr in block_arrays]
    full = stat(*totals)
    nb = block_arrays[0].shape[0]
    reps = np.array([stat(*(tot - arr[b] for tot, arr in zip(totals, block_arrays))) for b in range(nb)])
    centred = reps - reps.mean(axis=0)
    var = (nb - 1) / nb * (centred**2).sum(axis=0)
    return full, np.sqrt(var)


def _check_pair(a: ResponseSample, b: ResponseSample):
    if not a.trace.same_as(b.trace):
        raise PairingError("samples come from different arrival traces")
    if a.warmup != b.warmup:
        raise PairingError("samples use different warm-up cutoffs")


def empirical_tir(policy_sample: ResponseSample, fcfs_sample: ResponseSample, t_grid,
                  blocks: int = 100) -> TIRCurve:
    """Paired ``1 - P(T_policy > t) / P(T_FCFS > t)`` with block-jackknife errors.

    Both samples must come from the same trace; the standard errors account
    for the dependence between the two curves and along the trace.
    """
    _check_pair(policy_sample, fcfs_sample)
    t = np.asarray(t_grid, dtype=float)
    cp, _ = _block_exceedances(_kept(policy_sample), t, blocks)
    cf, _ = _block_exceedances(_kept(fcfs_sample), t, blocks)

    def ratio(p, f):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(f > 0, 1.0 - p / np.where(f > 0, f, 1.0), np.nan)

    tir, se = _jackknife(ratio, cp, cf)
    defined = cf.sum(axis=0) > 0
    return TIRCurve(t, tir, np.where(defined, se, np.nan), defined)


def quantile(sample, q: float) -> float:
    """Nearest-rank quantile of the post-warm-up responses."""
    if not 0 < q < 1:
        raise ConfigError("quantile level must lie in (0, 1)")
    x = np.sort(_kept(sample))
    return float(x[max(math.ceil(q * x.size), 1) - 1])


def default_window(sample, min_exceed: int = 100) -> tuple[float, float]:
    """``[t_0.999 / 2, t]`` where ``t`` still has ``min_exceed`` larger responses."""
    x = np.sort(_kept(sample))
    if x.size <= min_exceed:
        raise InsufficientDataError(f"need more than {min_exceed} responses")
    hi = float(x[x.size - min_exceed - 1])
    lo = 0.5 * quantile(x, 0.999)
    if not lo < hi:
        raise InsufficientDataError("too few responses for a tail window")
    return lo, hi


def _window_grid(window, points):
    lo, hi = window
    if not 0 < lo < hi:
        raise ConfigError("tail window must satisfy 0 < t_lo < t_hi")
    return np.geomspace(lo, hi, points)


def empirical_tail_constant(sample, gamma, window=None, points: int = 20, blocks: int = 100,
                            min_exceed: int = 100) -> TailEstimate:
    """Average of ``exp(gamma t) P(T > t)`` over a log-spaced grid in ``window``.

    Raises
    ------
    InsufficientDataError
        If fewer than ``min_exceed`` responses exceed the top of the window.
    """
    g = float(gamma)
    x = _kept(sample)
    window = default_window(x, min_exceed) if window is None else tuple(map(float, window))
    t = _window_grid(window, points)
    counts, sizes = _block_exceedances(x, t, blocks)
    if counts[:, -1].sum() < min_exceed:
        raise InsufficientDataError(
            f"only {int(counts[:, -1].sum())} responses exceed t={window[1]:.4g}; need {min_exceed}")
    weights = np.exp(g * t)

    def stat(c, m):
        return float(np.mean(weights * c / m))

    value, se = _jackknife(stat, counts, sizes)
    return TailEstimate(value, float(se), window)


def tir_plateau(policy_sample: ResponseSample, fcfs_sample: ResponseSample, gamma, window=None,
                points: int = 20, blocks: int = 100, min_exceed: int = 100) -> TailEstimate:
    """Ratio-of-constants estimate of the large-``t`` TIR.

    Computes ``1 - sum_t w_t P_policy(t) / sum_t w_t P_FCFS(t)`` with
    ``w_t = exp(gamma t)`` over the window, which tends to the asymptotic
    TIR when both tails are exponential with rate ``gamma``.  The default
    window is the intersection of both samples' :func:`default_window`.
    """
    _check_pair(policy_sample, fcfs_sample)
    g = float(gamma)
    if window is None:
        lo_p, hi_p = default_window(policy_sample, min_exceed)
        lo_f, hi_f = default_window(fcfs_sample, min_exceed)
        window = (max(lo_p, lo_f), min(hi_p, hi_f))
    window = tuple(map(float, window))
    t = _window_grid(window, points)
    w = np.exp(g * t)
    cp, _ = _block_exceedances(_kept(policy_sample), t, blocks)
    cf, _ = _block_exceedances(_kept(fcfs_sample), t, blocks)
    if cp[:, -1].sum() < min_exceed or cf[:, -1].sum() < min_exceed:
        raise InsufficientDataError("too few exceedances at the top of the plateau window")

    def stat(p, f):
        return 1.0 - float(np.dot(w, p)) / float(np.dot(w, f))

    value, se = _jackknife(stat, cp, cf)
    return TailEstimate(value, float(se), window)


# ---------------------------------------------------------------------------
# Crossing work

def sample_crossing_work(lam: float, model, boost_fn: BoostFunction, theta: float, u: float = math.inf,
                         reps: int = 100_000, seed: int = 0, horizon: float = 200.0,
                         chunk: int = 10_000) -> tuple[float, float]:
    """Monte-Carlo estimate of ``E[exp(theta V(u))]`` and its standard error.

    Each replication draws Poisson(``lam``) arrivals on ``(0, H)`` with
    ``H = min(u, horizon)``; a job arriving at ``t`` with boost ``b`` crosses
    time 0 (its boosted arrival is at or before 0) when ``t <= b``, and
    contributes its size if also ``t <= u``.  ``horizon`` must exceed the
    boosts that matter when ``u`` is infinite.
    """
    model = _as_model(model)
    rng = generator(seed, STREAM_AUX)
    h = min(u, horizon)
    values = np.empty(reps)
    for start in range(0, reps, chunk):
        m = min(chunk, reps - start)
        counts = rng.poisson(lam * h, m)
        total = int(counts.sum())
        owner = np.repeat(np.arange(m), counts)
        times = rng.uniform(0.0, h, total)
        labels, sizes = model.sample(rng, total)
        boosts = np.asarray(boost_fn.many(labels), dtype=float)
        work = np.where(times <= np.minimum(boosts, u), sizes, 0.0)
        values[start:start + m] = np.exp(theta * np.bincount(owner, weights=work, minlength=m))
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(reps))
