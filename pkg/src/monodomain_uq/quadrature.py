"""Sampling rules, level schedules, single- and multilevel estimators.

Quadrature sets are indexed by ``j``; set ``j`` has ``N_j`` points taken
from the schedule. Halton sets are prefixes of one sequence, so set
``j - 1`` is contained in set ``j``. Monte Carlo points are drawn from
generators seeded by ``(seed, stream, j, i)`` and are independent across
sets. A solver evaluation is identified by its level and point key, and an
estimator never evaluates the same pair twice.
"""

from __future__ import annotations

import math
import multiprocessing
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .errors import ArgumentError, ConfigurationError, SampleError

MC, QMC, MLMC, MLQMC = "MC", "QMC", "MLMC", "MLQMC"
METHODS = (MC, QMC, MLMC, MLQMC)

SL_CHUNK = 256


def first_primes(count: int) -> np.ndarray:
    if count < 0:
        raise ArgumentError("count must be non-negative")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    # p_k < k (ln k + ln ln k) for k >= 6
    limit = max(15, int(count * (math.log(count) + math.log(math.log(max(count, 3))))) + 1)
    sieve = np.ones(limit + 1, dtype=bool)
    sieve[:2] = False
    for p in range(2, int(limit**0.5) + 1):
        if sieve[p]:
            sieve[p * p::p] = False
    return np.nonzero(sieve)[0][:count].astype(np.int64)


def halton_block(start: int, count: int, dim: int) -> np.ndarray:
    """Halton points ``start .. start+count-1`` mapped to ``[-1, 1]^dim``."""
    if start < 1:
        raise ArgumentError("Halton indices start at 1")
    bases = first_primes(dim)
    r = kernels.radical_inverse_block(int(start), int(count), bases)
    return 2.0 * np.asarray(r) - 1.0


def halton(index: int, dim: int) -> np.ndarray:
    return halton_block(index, 1, dim)[0]


@dataclass(frozen=True)
class MonteCarloRule:
    """Uniform points on ``[-1, 1]^M`` from counter-seeded generators."""

    seed: int = 0
    stream: int = 0
    nested = False

    def __post_init__(self):
        if not (0 <= self.seed < 2**64 and self.stream >= 0):
            raise ConfigurationError("seed must be an unsigned 64-bit integer")

    @property
    def kind(self):
        return MC

    def keys(self, j, count):
        return [(j, i) for i in range(count)]

    def points(self, j, count, dim):
        out = np.empty((count, dim))
        for i in range(count):
            ss = np.random.SeedSequence([self.seed, self.stream, j, i])
            out[i] = np.random.default_rng(ss).uniform(-1.0, 1.0, dim)
        return out


@dataclass(frozen=True)
class HaltonRule:
    """Plain Halton sequence from index ``offset + 1``."""

    offset: int = 0
    nested = True

    def __post_init__(self):
        if self.offset < 0:
            raise ConfigurationError("Halton offset must be >= 0")

    @property
    def kind(self):
        return QMC

    def keys(self, j, count):
        return list(range(self.offset + 1, self.offset + 1 + count))

    def points(self, j, count, dim):
        if count == 0:
            return np.zeros((0, dim))
        return halton_block(self.offset + 1, count, dim)


@dataclass(frozen=True)
class FixedRule:
    """Explicit point list shared by every set (prefixes); for testing."""

    table: tuple
    nested = True

    @property
    def kind(self):
        return "fixed"

    def keys(self, j, count):
        if count > len(self.table):
            raise ArgumentError("not enough fixed points")
        return list(range(count))

    def points(self, j, count, dim):
        pts = np.asarray(self.table[:count], dtype=float).reshape(count, -1)
        if pts.shape[1] != dim:
            raise ArgumentError("fixed points have the wrong dimension")
        return pts


def sample_count(level: int, q: int, kind: str) -> int:
    """Samples on level ``level`` that balance the ``H^q`` discretization error."""
    if q not in (0, 1):
        raise ConfigurationError("q must be 0 or 1")
    if level < 0:
        raise ConfigurationError("level must be >= 0")
    if kind in (MC, MLMC):
        exponent = 4 if q == 0 else 2
    elif kind in (QMC, MLQMC):
        exponent = 2 if q == 0 else 1
    else:
        raise ConfigurationError(f"unknown rule kind {kind!r}")
    return 2 ** (exponent * level)


@dataclass(frozen=True)
class SampleSchedule:
    counts: tuple
    q: int
    kind: str

    def __post_init__(self):
        if any(int(c) < 1 for c in self.counts):
            raise ConfigurationError("sample counts must be positive")

    @property
    def finest(self):
        return len(self.counts) - 1

    def __getitem__(self, j):
        return self.counts[j]


def schedule(finest: int, q: int, kind: str) -> SampleSchedule:
    """Counts ``N_0 .. N_finest`` for the given rule kind."""
    return SampleSchedule(tuple(sample_count(l, q, kind) for l in range(finest + 1)), q, kind)


# -- evaluation ---------------------------------------------------------------

_WORKER_SAMPLER = None


def _timed(sampler, omega, level):
    t0 = time.perf_counter()
    value = sampler(omega, level)
    return value, time.perf_counter() - t0


def _run_job(job):
    index, omega, level = job
    try:
        return _timed(_WORKER_SAMPLER, omega, level)
    except Exception as exc:
        # exceptions with extra state do not always survive pickling
        return _Failure(index, f"{type(exc).__name__}: {exc}"), 0.0


@dataclass(frozen=True)
class _Failure:
    index: int
    message: str


class Evaluator:
    """Runs ``sampler(omega, level)`` jobs, optionally on a process pool.

    Results always come back in submission order, so every reduction done
    by the estimators is independent of the worker count.
    """

    def __init__(self, sampler: Callable, workers: int = 1):
        if workers < 1:
            raise ConfigurationError("workers must be >= 1")
        self.sampler = sampler
        self.workers = workers
        self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._pool is not None:
            self._pool.close()
            self._pool.join()
            self._pool = None

    def _ensure_pool(self):
        global _WORKER_SAMPLER
        if self._pool is None:
            _WORKER_SAMPLER = self.sampler
            ctx = multiprocessing.get_context("fork")
            self._pool = ctx.Pool(self.workers)
        return self._pool

    def run(self, omegas, level):
        """Evaluate at every row of ``omegas``; returns (values, seconds)."""
        jobs = [(i, w, level) for i, w in enumerate(omegas)]
        if self.workers == 1 or len(jobs) < 2:
            out = []
            for i, w, l in jobs:
                try:
                    out.append(_timed(self.sampler, w, l))
                except Exception as exc:
                    raise SampleError(f"sampler failed on level {level}, sample {i}: {exc}",
                                      level=level, index=i) from exc
        else:
            out = self._ensure_pool().map(_run_job, jobs, chunksize=max(1, len(jobs) // (4 * self.workers)))
            for v, _ in out:
                if isinstance(v, _Failure):
                    raise SampleError(f"sampler failed on level {level}, sample {v.index}: {v.message}",
                                      level=level, index=v.index)
        return [v for v, _ in out], [t for _, t in out]


def _evaluator(sampler, evaluator):
    if evaluator is not None:
        return evaluator
    if sampler is None:
        raise ArgumentError("need a sampler or an evaluator")
    return Evaluator(sampler)


def _lift(value, hierarchy, target):
    if hierarchy is not None and hasattr(value, "to_level"):
        return value.to_level(hierarchy, target)
    return value


def _sum(values):
    """Left-to-right sum; fixed order keeps results reproducible."""
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total


@dataclass
class EstimatorResult:
    estimate: object
    counts: list
    costs: list
    method: str = ""
    finest: int = 0
    evaluations: list = field(default_factory=list)

    def __post_init__(self):
        if any(c < 0 for c in self.costs):
            raise ArgumentError("costs must be non-negative")

    @property
    def total_cost(self):
        return float(sum(self.costs))


class _LevelCache:
    """Evaluations of one level keyed by point key, with timing."""

    def __init__(self, evaluator, level, dim):
        self.evaluator = evaluator
        self.level = level
        self.dim = dim
        self.values = {}
        self.cost = 0.0

    def get(self, rule, j, count):
        keys = rule.keys(j, count)
        missing = [i for i, k in enumerate(keys) if k not in self.values]
        if missing:
            pts = rule.points(j, count, self.dim)[missing]
            try:
                vals, secs = self.evaluator.run(pts, self.level)
            except SampleError as exc:
                index = None if exc.index is None else missing[exc.index]
                raise SampleError(f"{exc} (quadrature set {j})", level=self.level, index=index) from exc
            for i, v in zip(missing, vals):
                self.values[keys[i]] = v
            self.cost += float(sum(secs))
        return [self.values[k] for k in keys]


def estimate_sl(level: int, N: int, rule, sampler=None, dim: int = 1, evaluator=None,
                set_index: int | None = None) -> EstimatorResult:
    """Equal-weight average of ``N`` evaluations on one level."""
    if N < 1:
        raise ConfigurationError("N must be >= 1")
    ev = _evaluator(sampler, evaluator)
    j = level if set_index is None else set_index
    pts = rule.points(j, N, dim)
    total, cost = None, 0.0
    # chunked so only one chunk of full fields is alive; the summation order is unchanged
    for start in range(0, N, SL_CHUNK):
        vals, secs = ev.run(pts[start:start + SL_CHUNK], level)
        total = _sum(vals if total is None else [total] + vals)
        cost += float(sum(secs))
    est = total / N
    counts = [0] * level + [N]
    costs = [0.0] * level + [cost]
    return EstimatorResult(est, counts, costs, finest=level, evaluations=counts)


def estimate_ml_standard(finest: int, sched: SampleSchedule, rule, sampler=None, dim: int = 1,
                         hierarchy=None, evaluator=None) -> EstimatorResult:
    """``sum_l Q_{finest-l}(F_l - F_{l-1})`` with ``F_{-1} = 0``.

    Both members of a difference are evaluated at the same points; the
    coarse one is prolonged to level ``l`` before subtracting and every
    term is prolonged to ``finest``.
    """
    if hierarchy is not None and not hierarchy.nested:
        raise ConfigurationError("the standard multilevel estimator needs nested meshes; "
                                 "use estimate_ml_nonnested")
    if sched.finest < finest:
        raise ConfigurationError("schedule is shorter than the number of levels")
    ev = _evaluator(sampler, evaluator)
    caches = [_LevelCache(ev, l, dim) for l in range(finest + 1)]
    total = None
    for l in range(finest + 1):
        j = finest - l
        N = sched[j]
        fine = caches[l].get(rule, j, N)
        if l > 0:
            coarse = caches[l - 1].get(rule, j, N)
            diffs = [f - _lift(c, hierarchy, l) for f, c in zip(fine, coarse)]
        else:
            diffs = fine
        term = _lift(_sum(diffs) / N, hierarchy, finest)
        total = term if total is None else total + term
    return _result(total, caches, finest)


def estimate_ml_nonnested(finest: int, sched: SampleSchedule, rule, sampler=None, dim: int = 1,
                          hierarchy=None, evaluator=None) -> EstimatorResult:
    """``sum_j (Q_j - Q_{j-1})(F_{finest-j})`` with ``Q_{-1} = 0``.

    Each difference is formed on its own level and transferred to the
    finest level once. With nested point sets the coarser quadrature reuses
    the leading evaluations of the finer one.
    """
    if sched.finest < finest:
        raise ConfigurationError("schedule is shorter than the number of levels")
    ev = _evaluator(sampler, evaluator)
    caches = [_LevelCache(ev, l, dim) for l in range(finest + 1)]
    total = None
    for j in range(finest + 1):
        i = finest - j
        term = _sum(caches[i].get(rule, j, sched[j])) / sched[j]
        if j > 0:
            term = term - _sum(caches[i].get(rule, j - 1, sched[j - 1])) / sched[j - 1]
        term = _lift(term, hierarchy, finest)
        total = term if total is None else total + term
    return _result(total, caches, finest)


def _result(total, caches, finest):
    counts = [len(c.values) for c in caches]
    return EstimatorResult(total, counts, [c.cost for c in caches], finest=finest, evaluations=counts)


def run_method(method: str, finest: int, q: int, sampler=None, dim: int = 1, hierarchy=None,
               seed: int = 0, repetition: int = 0, offset: int = 0, evaluator=None,
               ml_form: str = "auto") -> EstimatorResult:
    """One estimate with the controlled schedule of ``method``."""
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    rule = MonteCarloRule(seed, repetition) if method in (MC, MLMC) else HaltonRule(offset)
    sched = schedule(finest, q, method)
    if method in (MC, QMC):
        res = estimate_sl(finest, sched[finest], rule, sampler, dim, evaluator)
    else:
        if ml_form == "auto":
            ml_form = "standard" if hierarchy is None or hierarchy.nested else "nonnested"
        if ml_form == "standard":
            res = estimate_ml_standard(finest, sched, rule, sampler, dim, hierarchy, evaluator)
        elif ml_form == "nonnested":
            res = estimate_ml_nonnested(finest, sched, rule, sampler, dim, hierarchy, evaluator)
        else:
            raise ConfigurationError(f"unknown multilevel form {ml_form!r}")
    res.method = method
    return res


# -- work models --------------------------------------------------------------

@dataclass(frozen=True)
class WorkModel:
    """Cost ``2^(gamma d l)`` per solve on level ``l``; ``L`` is the finest level."""

    gamma: float
    d: int = 4
    L: int = 1

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigurationError("gamma must be positive")
        if self.d < 1:
            raise ConfigurationError("d must be >= 1")
        if self.L < 0:
            raise ConfigurationError("L must be >= 0")


def _ml_work(gd, s, L):
    # 2^(sL) * sum_{l=1}^{L} 2^((gd-s) l), summed in closed form
    if math.isclose(gd, s, rel_tol=0.0, abs_tol=1e-12):
        return L * 2.0 ** (s * L)
    r = 2.0 ** (gd - s)
    return r * (2.0 ** (gd * L) - 2.0 ** (s * L)) / (r - 1.0)


def work_closed_form(model: WorkModel, method: str) -> float:
    gd, L = model.gamma * model.d, model.L
    if method == MC:
        return 2.0 ** ((gd + 4) * L)
    if method == QMC:
        return 2.0 ** ((gd + 2) * L)
    if method == MLMC:
        return _ml_work(gd, 4, L)
    if method == MLQMC:
        return _ml_work(gd, 2, L)
    raise ConfigurationError(f"unknown method {method!r}")


WORK_HEADER = ["method", "levels", "total_cost_s", "mean_cost_per_solve_s", "solves"]


def work_measured(results) -> list:
    """Rows ``[method, levels, total cost, mean cost per solve, solves]``.

    ``results`` maps method to ``{levels: EstimatorResult or list of them}``;
    repeated runs are averaged.
    """
    rows = []
    for method in sorted(results, key=lambda m: METHODS.index(m) if m in METHODS else 99):
        for levels in sorted(results[method]):
            runs = results[method][levels]
            runs = runs if isinstance(runs, (list, tuple)) else [runs]
            if not runs:
                raise ArgumentError("no timing data")
            total = float(np.mean([r.total_cost for r in runs]))
            solves = float(np.mean([sum(r.evaluations) for r in runs]))
            rows.append([method, levels, total, total / solves if solves else 0.0, solves])
    return rows
