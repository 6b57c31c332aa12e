"""Command-line interface: ``boosttail {gamma,constants,simulate,batch-verify}``.

Experiments are described by a JSON config; command-line flags override
individual fields.  Exit codes: 0 success, 2 configuration error,
3 numerical failure, 4 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import re
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Any, Sequence

import numpy as np

from . import __version__
from .analytics import (
    ConstantBoost,
    ThetaOptimalBoost,
    ZeroBoost,
    asymptotic_tir,
    best_nudge_m,
    boost_tail_constant,
    optimal_tail_constant,
    solve_gamma,
    tail_report,
    two_class_view,
)
from .batch import BatchInstance, random_instance, random_label_instance, verify_instance
from .dist import LabelSizeModel, model_from_dict
from .errors import BoostTailError, ConfigError, NumericalError, VerificationError
from .policy import PolicySpec
from .sim import (
    empirical_tir,
    generate_trace,
    generator,
    quantile,
    replay_cheat,
    run,
    survival,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VERIFY = 0, 2, 3, 4

POLICY_NAMES = ("fcfs", "gamma-boost", "boost", "cheat-boost", "srpt", "nudge", "nudge-k", "nudge-m")


# ---------------------------------------------------------------------------
# Configuration

@dataclass
class ExperimentConfig:
    """Validated experiment description (see README for the JSON layout)."""

    model: dict
    lam: float | None = None
    rho: float | None = None
    policies: list = field(default_factory=lambda: ["fcfs", "gamma-boost"])
    jobs: int = 1_000_000
    seeds: list = field(default_factory=lambda: [0])
    t_grid: Any = None
    warmup_fraction: float | None = None
    gamma_override: float | None = None
    noise_sigma: float = 0.0
    out: str = "."

    def to_dict(self) -> dict:
        out = {"model": self.model}
        out["lambda" if self.lam is not None else "rho"] = self.lam if self.lam is not None else self.rho
        for key in ("policies", "jobs", "seeds", "t_grid", "warmup_fraction", "gamma_override", "noise_sigma", "out"):
            out[key] = getattr(self, key)
        return out

    @property
    def label_model(self) -> LabelSizeModel:
        return model_from_dict(self.model)

    @property
    def arrival_rate(self) -> float:
        if self.lam is not None:
            return float(self.lam)
        return float(self.rho) / self.label_model.marginal.mean


_KNOWN_KEYS = {"model", "distribution", "lambda", "rho", "policies", "jobs", "seeds", "t_grid",
               "warmup_fraction", "gamma_override", "noise_sigma", "out"}


def _where(text: str | None, path: str, key: str) -> str:
    if text is not None:
        match = re.search(r'"%s"\s*:' % re.escape(key), text)
        if match:
            return f"{path}:{text.count(chr(10), 0, match.start()) + 1}"
    return path


def config_from_dict(raw: dict, text: str | None = None, path: str = "<config>") -> ExperimentConfig:
    """Validate a parsed config; ``text`` lets errors point at the offending line."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")

    def fail(key, msg):
        raise ConfigError(f"{_where(text, path, key)}: {key}: {msg}")

    for key in raw:
        if key not in _KNOWN_KEYS:
            fail(key, "unknown field")
    if ("model" in raw) == ("distribution" in raw):
        raise ConfigError(f"{path}: exactly one of 'model' or 'distribution' is required")
    key = "model" if "model" in raw else "distribution"
    model = raw[key]
    try:
        model_from_dict(model)
    except ConfigError as exc:
        fail(key, str(exc))
    except (TypeError, ValueError, AttributeError) as exc:
        fail(key, f"malformed: {exc}")
    if ("lambda" in raw) == ("rho" in raw):
        raise ConfigError(f"{path}: exactly one of 'lambda' or 'rho' is required")
    cfg = ExperimentConfig(model=model)
    for name, attr in (("lambda", "lam"), ("rho", "rho")):
        if name in raw:
            value = raw[name]
            if not isinstance(value, (int, float)) or not value > 0:
                fail(name, "must be a positive number")
            setattr(cfg, attr, float(value))
    if "policies" in raw:
        pols = raw["policies"]
        if not isinstance(pols, list) or not pols:
            fail("policies", "must be a nonempty list")
        for p in pols:
            try:
                policy_from_entry(p)
            except ConfigError as exc:
                fail("policies", str(exc))
        cfg.policies = pols
    if "jobs" in raw:
        if not isinstance(raw["jobs"], int) or raw["jobs"] < 1:
            fail("jobs", "must be a positive integer")
        cfg.jobs = raw["jobs"]
    if "seeds" in raw:
        seeds = raw["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            fail("seeds", "must be a nonempty list of nonnegative integers")
        cfg.seeds = seeds
    if "t_grid" in raw:
        try:
            _check_grid(raw["t_grid"])
        except ConfigError as exc:
            fail("t_grid", str(exc))
        cfg.t_grid = raw["t_grid"]
    if raw.get("warmup_fraction") is not None:
        w = raw["warmup_fraction"]
        if not isinstance(w, (int, float)) or not 0 <= w < 0.5:
            fail("warmup_fraction", "must lie in [0, 0.5)")
        cfg.warmup_fraction = float(w)
    if raw.get("gamma_override") is not None:
        g = raw["gamma_override"]
        if not isinstance(g, (int, float)) or not g > 0:
            fail("gamma_override", "must be a positive number")
        cfg.gamma_override = float(g)
    if "noise_sigma" in raw:
        s = raw["noise_sigma"]
        if not isinstance(s, (int, float)) or s < 0:
            fail("noise_sigma", "must be a nonnegative number")
        cfg.noise_sigma = float(s)
    if "out" in raw:
        if not isinstance(raw["out"], str):
            fail("out", "must be a path string")
        cfg.out = raw["out"]
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return config_from_dict(raw, text, path)


def _check_grid(spec):
    if spec is None:
        return
    if isinstance(spec, list):
        if not spec or not all(isinstance(x, (int, float)) and x >= 0 for x in spec):
            raise ConfigError("explicit grid must be a nonempty list of nonnegative times")
        return
    if not isinstance(spec, dict) or spec.get("type") not in ("linear", "log"):
        raise ConfigError("grid must be a list or {type: linear|log, start, stop, num}")
    num = spec.get("num", 50)
    if not isinstance(num, int) or num < 2:
        raise ConfigError("grid num must be an integer >= 2")
    start, stop = spec.get("start", 0.0), spec.get("stop")
    if stop is not None and not stop > start:
        raise ConfigError("grid stop must exceed start")
    if spec["type"] == "log" and not start > 0:
        raise ConfigError("log grid needs start > 0")


def make_grid(spec, default_stop: float) -> np.ndarray:
    """Expand a grid spec; a missing ``stop`` falls back to ``default_stop``."""
    if isinstance(spec, list):
        return np.asarray(spec, dtype=float)
    spec = spec or {"type": "linear"}
    start = float(spec.get("start", 0.0))
    stop = float(spec.get("stop") if spec.get("stop") is not None else default_stop)
    num = int(spec.get("num", 50))
    if spec["type"] == "log":
        return np.geomspace(start, stop, num)
    return np.linspace(start, stop, num)


def policy_from_entry(entry) -> tuple[str, dict]:
    """Normalise a policy entry (a name or ``{"name": ..., ...}``) to ``(name, params)``."""
    if isinstance(entry, str):
        name, params = entry, {}
    elif isinstance(entry, dict) and isinstance(entry.get("name"), str):
        params = {k: v for k, v in entry.items() if k != "name"}
        name = entry["name"]
    else:
        raise ConfigError(f"bad policy entry {entry!r}")
    if name not in POLICY_NAMES:
        raise ConfigError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)}")
    if name in ("nudge-k", "nudge-m"):
        k = params.get("k")
        if not isinstance(k, int) or k < 1:
            raise ConfigError(f"{name} needs an integer k >= 1")
    if name == "boost":
        b = params.get("boost")
        if not isinstance(b, dict) or b.get("type") not in ("theta_optimal", "constant", "zero"):
            raise ConfigError("boost needs a 'boost' object of type theta_optimal, constant or zero")
    return name, params


def _boost_from(params: dict, model, gamma: float):
    spec = params.get("boost", {"type": "theta_optimal"})
    kind = spec.get("type")
    if kind == "zero":
        return ZeroBoost()
    if kind == "constant":
        return ConstantBoost(float(spec["value"]))
    return ThetaOptimalBoost(float(spec.get("theta", gamma)), model)


def build_policy(entry, model, gamma: float) -> tuple[str, PolicySpec | None, Any]:
    """Return ``(label, spec, cheat_boost)``; exactly one of the last two is set."""
    name, params = policy_from_entry(entry)
    threshold = params.get("threshold")
    if name == "fcfs":
        return name, PolicySpec.fcfs(), None
    if name == "gamma-boost":
        return name, PolicySpec.boost(ThetaOptimalBoost(gamma, model), bool(params.get("preemptive", False))), None
    if name == "boost":
        return name, PolicySpec.boost(_boost_from(params, model, gamma), bool(params.get("preemptive", False))), None
    if name == "cheat-boost":
        return name, None, _boost_from(params, model, gamma)
    if name == "srpt":
        return name, PolicySpec.srpt(), None
    if name == "nudge":
        return name, PolicySpec.nudge(threshold), None
    if name == "nudge-k":
        return f"nudge-k{params['k']}", PolicySpec.nudge_k(params["k"], threshold), None
    return f"nudge-m{params['k']}", PolicySpec.nudge_m(params["k"], threshold), None


# ---------------------------------------------------------------------------
# Output helpers

def atomic_write(path: str, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(x: float):
    return x if math.isfinite(x) else str(x)


def read_metadata(path: str) -> dict[str, str]:
    """Parse the ``# key: value`` header of a curve CSV."""
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition(": ")
            meta[key] = value
    return meta


def config_from_metadata(path: str) -> ExperimentConfig:
    """Rebuild the experiment config recorded in a curve CSV header."""
    return config_from_dict(json.loads(read_metadata(path)["config"]))


# ---------------------------------------------------------------------------
# Commands

def cmd_gamma(cfg: ExperimentConfig) -> dict:
    model = cfg.label_model
    lam = cfg.arrival_rate
    rep = tail_report(lam, model)
    return {
        "gamma": rep.decay.gamma,
        "lambda": lam,
        "rho": rep.decay.rho,
        "theta_star": _num(model.marginal.theta_star),
        "c_w": rep.c_w,
        "c_fcfs": rep.c_fcfs,
    }


def cmd_constants(cfg: ExperimentConfig, k_max: int = 30) -> list[tuple[str, float, float]]:
    """Rows of (policy, tail constant, asymptotic TIR)."""
    model = cfg.label_model
    lam = cfg.arrival_rate
    rep = tail_report(lam, model)
    g = rep.decay.gamma
    rows = [("fcfs", rep.c_fcfs, 0.0), ("gamma-boost", rep.c_star, rep.tir_star)]
    if cfg.gamma_override is not None:
        c = boost_tail_constant(lam, model, ThetaOptimalBoost(cfg.gamma_override, model), g, rep.c_w).value
        rows.append((f"boost[gamma_hat={cfg.gamma_override:g}]", c, asymptotic_tir(c, rep.c_fcfs)))
    try:
        view = two_class_view(model, g)
        k, ratio = best_nudge_m(view.p1, view.s1, view.s2, k_max)
        rows.append((f"nudge-m[K={k}]", ratio * rep.c_fcfs, 1.0 - ratio))
    except BoostTailError:
        pass
    return rows


def _simulate_seed(cfg_dict: dict, seed: int, per_job: bool) -> list[dict]:
    cfg = config_from_dict(cfg_dict)
    model = cfg.label_model
    lam = cfg.arrival_rate
    decay = solve_gamma(lam, model)
    gamma_used = cfg.gamma_override if cfg.gamma_override is not None else decay.gamma
    trace = generate_trace(lam, model, cfg.jobs, seed, cfg.noise_sigma)
    warmup = None if cfg.warmup_fraction is None else int(cfg.warmup_fraction * cfg.jobs)
    fcfs = run(trace, PolicySpec.fcfs(), warmup=warmup)
    grid = make_grid(cfg.t_grid, quantile(fcfs, 0.999))
    written = []
    for entry in cfg.policies:
        label, spec, cheat = build_policy(entry, model, gamma_used)
        sample = replay_cheat(trace, cheat, warmup=fcfs.warmup) if cheat is not None else (
            fcfs if spec.kind == "fcfs" else run(trace, spec, warmup=fcfs.warmup))
        surv = survival(sample, grid)
        tir = empirical_tir(sample, fcfs, grid)
        meta = {
            "seed": seed,
            "lambda": lam,
            "rho": decay.rho,
            "policy": label,
            "distribution": json.dumps(cfg.model, sort_keys=True),
            "warmup": sample.warmup,
            "jobs": cfg.jobs,
            "gamma": decay.gamma,
            "gamma_used": gamma_used,
            "pairing": "common random numbers: every policy replays the same trace",
            "streams": "Philox(seed, 0)=interarrivals, (seed, 1)=labels and sizes, (seed, 2)=size noise",
            "config": json.dumps(cfg.to_dict(), sort_keys=True),
        }
        negatives = int((sample.kept < 0).sum()) if cheat is not None else 0
        if cheat is not None:
            meta["negative_responses"] = negatives
        buf = io.StringIO()
        for key, value in meta.items():
            buf.write(f"# {key}: {value}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "survival", "stderr", "tir", "tir_stderr"])
        for row in zip(grid, surv.survival, surv.stderr, tir.tir, tir.stderr):
            writer.writerow([repr(float(v)) for v in row])
        path = os.path.join(cfg.out, f"{label}_seed{seed}.csv")
        atomic_write(path, buf.getvalue())
        record = {"policy": label, "seed": seed, "path": path, "negative_responses": negatives}
        if per_job:
            jbuf = io.StringIO()
            jw = csv.writer(jbuf, lineterminator="\n")
            jw.writerow(["id", "arrival", "size", "departure", "response"])
            for i, (a, s, d) in enumerate(zip(trace.arrivals, trace.sizes, sample.departures)):
                jw.writerow([i, repr(float(a)), repr(float(s)), repr(float(d)), repr(float(d - a))])
            jpath = os.path.join(cfg.out, f"{label}_seed{seed}_jobs.csv")
            atomic_write(jpath, jbuf.getvalue())
            record["jobs_path"] = jpath
        written.append(record)
    return written


def cmd_simulate(cfg: ExperimentConfig, workers: int = 1, per_job: bool = False) -> list[dict]:
    """Run every policy on one shared trace per seed and write curve CSVs."""
    cfg_dict = cfg.to_dict()
    if workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_simulate_seed, [cfg_dict] * len(cfg.seeds), cfg.seeds,
                                  [per_job] * len(cfg.seeds)))
    else:
        parts = [_simulate_seed(cfg_dict, seed, per_job) for seed in cfg.seeds]
    return [rec for part in parts for rec in part]


def instance_from_dict(raw: dict) -> BatchInstance:
    try:
        arrivals = raw["arrivals"]
        if "labels" in raw:
            return BatchInstance(tuple(arrivals), tuple(raw["labels"]), model_from_dict(raw["model"]))
        return BatchInstance(tuple(arrivals), tuple(raw["sizes"]))
    except KeyError as exc:
        raise ConfigError(f"batch instance is missing {exc.args[0]!r}") from None
    except TypeError as exc:
        raise ConfigError(f"malformed batch instance: {exc}") from None


def load_instances(path: str) -> list[dict]:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read instances: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    items = raw.get("instances") if isinstance(raw, dict) else raw
    if not isinstance(items, list):
        raise ConfigError(f"{path}: expected a list of instances")
    return items


def bundled_instances_path() -> str:
    return str(resources.files("boosttail") / "data" / "batch_regression.json")


def cmd_batch_verify(items: Sequence[dict], theta: float | None) -> dict:
    """Check each instance's claimed (or boost) order against brute force."""
    results = []
    for k, raw in enumerate(items):
        th = raw.get("theta", theta)
        if th is None:
            raise ConfigError(f"instance {k} has no theta and no --theta was given")
        inst = instance_from_dict(raw)
        rep = verify_instance(inst, float(th), raw.get("claimed_order"))
        rep["index"] = k
        results.append(rep)
    failed = [r for r in results if not r["pass"]]
    return {"checked": len(results), "passed": len(results) - len(failed), "failed": len(failed), "results": results}


def random_items(n: int, count: int, theta: float, seed: int, labels: bool = False) -> list[dict]:
    rng = generator(seed, 3)
    make = random_label_instance if labels else random_instance
    return [dict(make(rng, n).to_dict(), theta=theta) for _ in range(count)]


# ---------------------------------------------------------------------------
# Entry point

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boosttail", description="Tail constants and simulation of Boost scheduling.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sim=False):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output file (constants) or directory (simulate)")
        if sim:
            p.add_argument("--seed", type=int, action="append", help="seed; repeat for several")
            p.add_argument("--jobs", type=int, help="jobs per run")
            p.add_argument("--workers", type=int, default=1, help="parallel seeds")
            p.add_argument("--per-job", action="store_true", help="also write per-job CSVs")
        return p

    common(sub.add_parser("gamma", help="decay rate and FCFS constants as JSON"))
    c = common(sub.add_parser("constants", help="CSV of analytic tail constants"))
    c.add_argument("--k-max", type=int, default=30, help="largest Nudge-M K scanned")
    common(sub.add_parser("simulate", help="simulate policies and write curve CSVs"), sim=True)
    b = sub.add_parser("batch-verify", help="certify boost orders by brute force")
    src = b.add_mutually_exclusive_group()
    src.add_argument("--instances", help="JSON file of instances (default: bundled regression set)")
    src.add_argument("--random", metavar="N,COUNT", help="random instances with N jobs each")
    b.add_argument("--labels", action="store_true", help="random label instances instead of known sizes")
    b.add_argument("--theta", type=float, help="theta for instances that carry none")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="also write the JSON report here")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None):
        if any(s < 0 for s in args.seed):
            raise ConfigError("--seed must be nonnegative")
        cfg.seeds = list(args.seed)
    if getattr(args, "jobs", None) is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be positive")
        cfg.jobs = args.jobs
    if getattr(args, "out", None) is not None and args.command == "simulate":
        cfg.out = args.out
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "batch-verify":
            if args.random:
                try:
                    n, count = (int(x) for x in args.random.split(","))
                except ValueError:
                    raise ConfigError("--random expects N,COUNT") from None
                if args.theta is None:
                    raise ConfigError("--random needs --theta")
                items = random_items(n, count, args.theta, args.seed, args.labels)
            else:
                items = load_instances(args.instances or bundled_instances_path())
            report = cmd_batch_verify(items, args.theta)
            text = json.dumps(report, indent=2)
            print(text)
            if args.out:
                atomic_write(args.out, text + "\n")
            if report["failed"]:
                for r in report["results"]:
                    if not r["pass"]:
                        print(f"instance {r['index']}: order {r['order']} costs {r['cost']:.12g}, "
                              f"optimum {r['optimum']:.12g}, gap {r['gap']:.6g}", file=sys.stderr)
                raise VerificationError(f"{report['failed']} of {report['checked']} instances failed")
            return EXIT_OK

        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "gamma":
            print(json.dumps(cmd_gamma(cfg), indent=2))
        elif args.command == "constants":
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(["policy", "tail_constant", "asymptotic_tir"])
            for name, c, tir in cmd_constants(cfg, args.k_max):
                writer.writerow([name, repr(c), repr(tir)])
            if args.out:
                atomic_write(args.out, buf.getvalue())
            else:
                sys.stdout.write(buf.getvalue())
        else:
            records = cmd_simulate(cfg, args.workers, args.per_job)
            for rec in records:
                print(rec["path"])
                if rec["negative_responses"]:
                    print(f"warning: {rec['policy']} seed {rec['seed']}: "
                          f"{rec['negative_responses']} negative response times", file=sys.stderr)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
