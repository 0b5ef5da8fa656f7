"""Monte Carlo, multilevel Monte Carlo and bootstrap MLMC estimators of E(u).

All estimators return the mean field on the reference grid. Sample ``i`` of
a run draws its randomness from the seed label
``(master, purpose, replication, level, i)``; single-level MC, level 0 of
MLMC and every level of the bootstrap estimator use no level component, so
the same index means the same outcome in all three.

Per-sample work can be spread over threads. Results are always reduced in
index order, so the output does not depend on the thread count.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .problems import Problem, SampleDraw, solve_level
from .spectra import CutoffError, choose_cutoff

log = logging.getLogger(__name__)

CHUNK = 64


class ScheduleError(ValueError):
    pass


class SampleError(RuntimeError):
    pass


class BiasBoundError(AssertionError):
    pass


# ---------------------------------------------------------------- schedules

@dataclass(frozen=True)
class LevelSpec:
    level: int
    h_bar: float
    e_h2: float
    N: int
    eps: float
    M: int


@dataclass(frozen=True)
class LevelSchedule:
    levels: tuple
    kappa: float = 1.0
    nu: float = 0.01

    @property
    def L(self) -> int:
        return len(self.levels) - 1

    @property
    def M(self) -> list[int]:
        return [s.M for s in self.levels]

    @property
    def N(self) -> list[int]:
        return [s.N for s in self.levels]

    @property
    def eps(self) -> list[float]:
        return [s.eps for s in self.levels]

    @property
    def e_h2(self) -> list[float]:
        return [s.e_h2 for s in self.levels]

    def validate(self, nested: bool = False) -> None:
        h = [s.h_bar for s in self.levels]
        if any(b >= a for a, b in zip(h, h[1:])):
            raise ScheduleError("level thresholds must decrease strictly")
        if any(b < a for a, b in zip(self.N, self.N[1:])):
            raise ScheduleError("cutoffs must be non-decreasing")
        if any(b > a for a, b in zip(self.eps, self.eps[1:])):
            raise ScheduleError("jump biases must be non-increasing")
        if any(m < 1 for m in self.M):
            raise ScheduleError("every level needs at least one sample")
        if nested and any(b > a for a, b in zip(self.M, self.M[1:])):
            raise ScheduleError(f"bootstrap needs non-increasing sample counts, got {self.M}")


@dataclass(frozen=True)
class PilotStats:
    h_bar: np.ndarray
    e_h2: np.ndarray
    stderr: np.ndarray
    n_pilot: int


def pilot_mesh_stats(problem: Problem, L: int, n_pilot: int, adaptive: bool, master: int = 0) -> PilotStats:
    """Estimate E(h_hat^2) per level from independent partition draws.

    Uniform meshes are deterministic, so their value is exact. Pilot draws use
    their own seed purpose and never overlap estimation streams.
    """
    if n_pilot < 10:
        raise ValueError("n_pilot must be at least 10")
    h_bar = np.array([problem.h_level(l) for l in range(L + 1)])
    if not adaptive:
        e = np.array([problem.mesh(None, l, False).realized_h ** 2 for l in range(L + 1)])
        return PilotStats(h_bar, e, np.zeros(L + 1), n_pilot)
    h2 = np.empty((n_pilot, L + 1))
    for i in range(n_pilot):
        draw = SampleDraw(problem, master, rng.PILOT, 0, rng.NO_LEVEL, i)
        for l in range(L + 1):
            h2[i, l] = problem.mesh(draw.partition, l, True).realized_h ** 2
    return PilotStats(h_bar, h2.mean(axis=0), h2.std(axis=0, ddof=1) / math.sqrt(n_pilot), n_pilot)


def build_schedule(pilot: PilotStats, L: int, kappa: float = 1.0, nu: float = 0.01, spectrum=None,
                   heights=None, sample_rule: str = "previous", nested: bool = False) -> LevelSchedule:
    """Equilibrated level schedule.

    Tails and jump biases follow the level's mean-square mesh size,
    Xi_N = eps = E(h_l^2)^kappa. Sample counts are
    M_0 = ceil(E_L^-kappa) and M_l = ceil(E_L^-kappa E_{l-1}^kappa l^(2(1+nu)))
    (``sample_rule="previous"``), or with E_l in place of E_{l-1}
    (``sample_rule="same"``). ``nested`` caps M_l at M_{l-1}, as the
    bootstrap estimator requires.
    """
    if L < 0 or L >= len(pilot.e_h2):
        raise ScheduleError(f"pilot statistics cover levels 0..{len(pilot.e_h2) - 1}, need 0..{L}")
    if sample_rule not in ("previous", "same"):
        raise ValueError("sample_rule must be 'previous' or 'same'")
    e = np.asarray(pilot.e_h2[: L + 1], dtype=float) ** kappa
    exact = heights is None or getattr(heights, "exact", True)
    N, eps, M = [], [], []
    for l in range(L + 1):
        if spectrum is None:
            n = 0
        else:
            try:
                n = choose_cutoff(spectrum, float(e[l]))
            except CutoffError as exc:
                raise ScheduleError(f"level {l}: {exc}") from exc
        N.append(max(n, N[-1]) if N else n)
        eps.append(0.0 if exact else float(min(e[l], eps[-1] if eps else np.inf)))
        if l == 0:
            m = math.ceil(1.0 / e[L] - 1e-9)
        else:
            ref = e[l - 1] if sample_rule == "previous" else e[l]
            m = math.ceil(ref / e[L] * l ** (2.0 * (1.0 + nu)) - 1e-9)
        M.append(max(1, int(m)))
    if nested:
        for l in range(1, L + 1):
            M[l] = min(M[l], M[l - 1])
    levels = tuple(LevelSpec(l, float(pilot.h_bar[l]), float(pilot.e_h2[l]), N[l], eps[l], M[l]) for l in range(L + 1))
    sched = LevelSchedule(levels, kappa, nu)
    sched.validate(nested)
    return sched


def deterministic_pilot(h: list[float]) -> PilotStats:
    h = np.asarray(h, dtype=float)
    return PilotStats(h, h**2, np.zeros(h.size), 0)


# ---------------------------------------------------------------- output

@dataclass
class LevelStats:
    level: int
    M: int
    solves: int = 0
    wall_time: float = 0.0
    variance: float = float("nan")
    bias_max_sq: float = 0.0
    bias_mean_sq: float = 0.0
    bias_bound: float = 0.0
    realized_h2: float = float("nan")


@dataclass
class EstimatorOutput:
    kind: str
    mean: np.ndarray
    levels: list
    total_time: float
    schedule: LevelSchedule | None = None
    solves: int = 0
    predicted_variance: float = float("nan")
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------- helpers

def _ordered_map(fn, items, threads: int):
    if threads <= 1:
        for it in items:
            yield fn(it)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        items = list(items)
        for start in range(0, len(items), CHUNK * threads):
            yield from pool.map(fn, items[start:start + CHUNK * threads])


class _BiasTracker:
    """Checks coupled jump draws against the exact inverse of the same uniforms."""

    def __init__(self, problem: Problem, eps: float, enabled: bool):
        self.model = problem.heights
        self.eps = eps
        self.enabled = enabled and eps > 0 and hasattr(self.model, "exact_from_uniforms")
        self.u, self.h = [], []
        self.count = 0
        self.sum_sq = 0.0
        self.max_sq = 0.0
        self.bound = 0.0

    def add(self, res):
        if not self.enabled:
            return
        self.u.append(res.uniforms)
        self.h.append(res.heights)
        self.bound = max(self.bound, res.bias)
        if len(self.u) >= 256:
            self.flush()

    def flush(self):
        if not self.enabled or not self.u:
            return
        u = np.concatenate(self.u)
        approx = np.concatenate(self.h)
        exact = self.model.exact_from_uniforms(u)
        sq = (approx - exact) ** 2
        self.count += sq.size
        self.sum_sq += float(sq.sum())
        self.max_sq = max(self.max_sq, float(sq.max()))
        self.u, self.h = [], []
        if self.max_sq > self.bound * (1.0 + 1e-9) + 1e-24 or self.bound > self.eps:
            raise BiasBoundError(f"coupled jump error {self.max_sq:.3e} exceeds bound {self.bound:.3e} (eps {self.eps:.3e})")

    def store(self, stats: LevelStats):
        self.flush()
        if self.enabled:
            stats.bias_max_sq = self.max_sq
            stats.bias_mean_sq = self.sum_sq / max(self.count, 1)
            stats.bias_bound = self.bound
            if stats.bias_mean_sq > self.eps:
                raise BiasBoundError(f"mean squared jump error {stats.bias_mean_sq:.3e} exceeds eps {self.eps:.3e}")


def _solve(draw, spec: LevelSpec, adaptive, keep):
    try:
        return solve_level(draw, spec.level, spec.N, spec.eps, adaptive, keep_heights=keep)
    except Exception as exc:  # fail fast, naming the sample
        raise SampleError(f"sample {draw.key} failed at level {spec.level}: {exc}") from exc


def _variance(problem, sq_sum, mean, M):
    if M < 2:
        return float("nan")
    return max(0.0, (sq_sum - M * problem.h1_norm_sq(mean)) / (M - 1))


# ---------------------------------------------------------------- estimators

def mc_estimate(problem: Problem, spec: LevelSpec, M: int, master: int, replication: int = 0,
                adaptive: bool = True, purpose: int = rng.ESTIMATION, threads: int = 1,
                check_bias: bool = True) -> EstimatorOutput:
    """Plain Monte Carlo average of M solutions at one level."""
    if M < 1:
        raise ValueError("M must be positive")
    t0 = time.perf_counter()
    keep = check_bias
    tracker = _BiasTracker(problem, spec.eps, check_bias)

    def work(i):
        draw = SampleDraw(problem, master, purpose, replication, rng.NO_LEVEL, i)
        res = _solve(draw, spec, adaptive, keep)
        return res, problem.h1_norm_sq(res.values)

    S = np.zeros(problem.grid_size)
    sq = 0.0
    h2 = 0.0
    for res, q in _ordered_map(work, range(M), threads):
        S += res.values
        sq += q
        h2 += res.realized_h**2
        tracker.add(res)
    mean = S / M
    stats = LevelStats(spec.level, M, M, time.perf_counter() - t0, _variance(problem, sq, mean, M), realized_h2=h2 / M)
    tracker.store(stats)
    out = EstimatorOutput("mc", mean, [stats], time.perf_counter() - t0, None, M)
    out.predicted_variance = stats.variance / M
    return out


def mlmc_estimate(problem: Problem, schedule: LevelSchedule, master: int, replication: int = 0,
                  adaptive: bool = True, purpose: int = rng.ESTIMATION, threads: int = 1,
                  check_bias: bool = True) -> EstimatorOutput:
    """Multilevel estimator: sum over levels of mean coupled corrections.

    Sample i of level l > 0 solves the SAME outcome on levels l and l-1.
    """
    schedule.validate()
    t0 = time.perf_counter()
    mean = np.zeros(problem.grid_size)
    stats_all = []
    solves = 0
    pred = 0.0
    specs = schedule.levels
    for l, spec in enumerate(specs):
        tl = time.perf_counter()
        lab = rng.NO_LEVEL if l == 0 else l
        tracker = _BiasTracker(problem, spec.eps, check_bias)
        coarse_tracker = _BiasTracker(problem, specs[l - 1].eps, check_bias) if l else None

        def work(i, spec=spec, l=l, lab=lab):
            draw = SampleDraw(problem, master, purpose, replication, lab, i)
            fine = _solve(draw, spec, adaptive, check_bias)
            coarse = _solve(draw, specs[l - 1], adaptive, check_bias) if l else None
            y = fine.values - coarse.values if l else fine.values
            return fine, coarse, y, problem.h1_norm_sq(y)

        S = np.zeros(problem.grid_size)
        sq = 0.0
        h2 = 0.0
        for fine, coarse, y, q in _ordered_map(work, range(spec.M), threads):
            S += y
            sq += q
            h2 += fine.realized_h**2
            tracker.add(fine)
            if coarse is not None:
                coarse_tracker.add(coarse)
        level_mean = S / spec.M
        mean = mean + level_mean
        n_solves = spec.M * (2 if l else 1)
        solves += n_solves
        st = LevelStats(l, spec.M, n_solves, time.perf_counter() - tl,
                        _variance(problem, sq, level_mean, spec.M), realized_h2=h2 / spec.M)
        tracker.store(st)
        if coarse_tracker is not None:
            coarse_tracker.flush()
        pred += st.variance / spec.M if np.isfinite(st.variance) else 0.0
        stats_all.append(st)
    out = EstimatorOutput("mlmc", mean, stats_all, time.perf_counter() - t0, schedule, solves)
    out.predicted_variance = pred
    return out


def bootstrap_mlmc_estimate(problem: Problem, schedule: LevelSchedule, master: int, replication: int = 0,
                            adaptive: bool = True, purpose: int = rng.ESTIMATION, threads: int = 1,
                            check_bias: bool = True) -> EstimatorOutput:
    """Bootstrap MLMC: outcome i feeds every level l with i < M_l.

    Each level solution of an outcome is computed once and reused by both
    corrections it enters, so the solve count is sum(M_l). The estimator is
    assembled as sum_l (T_l / M_l - T'_l / M_{l+1}), T_l summing u_l over
    i < M_l and T'_l over i < M_{l+1}.
    """
    schedule.validate(nested=True)
    t0 = time.perf_counter()
    specs = schedule.levels
    L = len(specs) - 1
    M = schedule.M
    G = problem.grid_size
    T = [np.zeros(G) for _ in specs]
    Tn = [np.zeros(G) for _ in specs]
    Ysum = [np.zeros(G) for _ in specs]
    Ysq = [0.0] * (L + 1)
    Zsum = [np.zeros(G) for _ in specs]
    Zsq = [0.0] * (L + 1)
    h2 = [0.0] * (L + 1)
    times = [0.0] * (L + 1)
    trackers = [_BiasTracker(problem, s.eps, check_bias) for s in specs]

    def work(i):
        draw = SampleDraw(problem, master, purpose, replication, rng.NO_LEVEL, i)
        out = []
        for l, spec in enumerate(specs):
            if i >= M[l]:
                break
            tl = time.perf_counter()
            out.append((_solve(draw, spec, adaptive, check_bias), time.perf_counter() - tl))
        return out

    for i, sols in enumerate(_ordered_map(work, range(M[0]), threads)):
        prev = None
        z = np.zeros(G)
        for l, (res, dt) in enumerate(sols):
            u = res.values
            T[l] += u
            if l < L and i < M[l + 1]:
                Tn[l] += u
            y = u - prev if prev is not None else u
            Ysum[l] += y
            Ysq[l] += problem.h1_norm_sq(y)
            z = z + y / M[l]
            Zsum[l] += z
            Zsq[l] += problem.h1_norm_sq(z)
            h2[l] += res.realized_h**2
            times[l] += dt
            trackers[l].add(res)
            prev = u
    mean = np.zeros(G)
    for l in range(L + 1):
        bracket = T[l] / M[l] - Tn[l] / M[l + 1] if l < L else T[l] / M[l]
        mean = mean + bracket
    stats_all = []
    pred = 0.0
    for l in range(L + 1):
        st = LevelStats(l, M[l], M[l], times[l], _variance(problem, Ysq[l], Ysum[l] / M[l], M[l]),
                        realized_h2=h2[l] / M[l])
        trackers[l].store(st)
        stats_all.append(st)
        vz = _variance(problem, Zsq[l], Zsum[l] / M[l], M[l])
        m_next = M[l + 1] if l < L else 0
        if np.isfinite(vz):
            pred += (M[l] - m_next) * vz
    out = EstimatorOutput("mlmc-bootstrap", mean, stats_all, time.perf_counter() - t0, schedule, sum(M))
    out.predicted_variance = pred
    return out


ESTIMATORS = ("mc", "mlmc", "mlmc-bootstrap")


def run_estimator(kind: str, problem: Problem, schedule: LevelSchedule, master: int, replication: int = 0,
                  adaptive: bool = True, purpose: int = rng.ESTIMATION, threads: int = 1,
                  check_bias: bool = True) -> EstimatorOutput:
    """Dispatch by estimator name; ``mc`` runs at the finest schedule level with M_0 samples."""
    if kind == "mc":
        out = mc_estimate(problem, schedule.levels[-1], schedule.M[0], master, replication, adaptive, purpose,
                          threads, check_bias)
        out.schedule = schedule
        return out
    if kind == "mlmc":
        return mlmc_estimate(problem, schedule, master, replication, adaptive, purpose, threads, check_bias)
    if kind == "mlmc-bootstrap":
        return bootstrap_mlmc_estimate(problem, schedule, master, replication, adaptive, purpose, threads, check_bias)
    raise ValueError(f"unknown estimator {kind!r}; choose from {', '.join(ESTIMATORS)}")


# ---------------------------------------------------------------- studies

def fit_rate(rows) -> float:
    """Decay rate of RMSE in the refinement size h = 1/inv_h.

    ``rows`` are (inv_h, rmse) pairs; the result is the least-squares slope of
    log(rmse) against log(h).
    """
    rows = np.asarray(list(rows), dtype=float)
    if rows.ndim != 2 or rows.shape[0] < 3:
        raise ValueError("need at least three (inv_h, rmse) rows")
    if np.any(rows <= 0) or not np.all(np.isfinite(rows)):
        raise ValueError("rate fit needs positive finite values")
    slope = np.polyfit(-np.log(rows[:, 0]), np.log(rows[:, 1]), 1)[0]
    return float(slope)


@dataclass
class StudyRow:
    L: int
    inv_h: float
    rmse: float
    wall_time_s: float
    M_levels: list
    N_levels: list
    eps_levels: list
    slope_so_far: float | None
    errors: list = field(default_factory=list)


@dataclass
class StudyResult:
    rows: list
    reference: EstimatorOutput
    pilot: PilotStats
    schedules: dict
    outputs: dict = field(default_factory=dict)

    @property
    def slope(self) -> float:
        return fit_rate([(r.inv_h, r.rmse) for r in self.rows])


def rmse_study(problem: Problem, L_values, ref_level: int, replications: int, kind: str, master: int,
               adaptive: bool = True, n_pilot: int | None = None, kappa: float = 1.0, nu: float = 0.01,
               sample_rule: str = "previous", threads: int = 1, reference: EstimatorOutput | None = None,
               pilot: PilotStats | None = None, keep_outputs: bool = False, check_bias: bool = True,
               progress=None) -> StudyResult:
    """RMSE of the estimator against a fixed high-level reference.

    Replication r uses the same seed labels for every L (common random
    numbers), which makes the RMSE curve smoother in L without biasing it.
    """
    L_values = sorted(int(l) for l in L_values)
    if not L_values:
        raise ValueError("empty L range")
    if ref_level <= max(L_values):
        raise ValueError("the reference level must exceed every studied level")
    if replications < 1:
        raise ValueError("need at least one replication")
    if n_pilot is None:
        n_pilot = 100 if problem.dim == 1 else 30
    if pilot is None:
        pilot = pilot_mesh_stats(problem, ref_level, n_pilot, adaptive, master)
    nested = kind == "mlmc-bootstrap"
    sched = lambda L: build_schedule(pilot, L, kappa, nu, problem.spectrum, problem.heights, sample_rule, nested)
    if reference is None and problem.deterministic and problem.dim == 1:
        reference = EstimatorOutput("oracle", problem.oracle_values(), [], 0.0)
    if reference is None:
        reference = run_estimator(kind, problem, sched(ref_level), master, 0, adaptive, rng.REFERENCE, threads,
                                  check_bias)
        if progress:
            progress(f"reference at level {ref_level}: {reference.total_time:.1f}s, {reference.solves} solves")
    rows, schedules, outputs = [], {}, {}
    for L in L_values:
        s = sched(L)
        schedules[L] = s
        errs, times = [], []
        for r in range(replications):
            out = run_estimator(kind, problem, s, master, r, adaptive, rng.ESTIMATION, threads, check_bias)
            errs.append(problem.h1_dist(out.mean, reference.mean))
            times.append(out.total_time)
            if keep_outputs:
                outputs[(L, r)] = out
        rmse = math.sqrt(float(np.mean(np.square(errs))))
        row = StudyRow(L, 1.0 / math.sqrt(s.e_h2[-1]), rmse, float(np.mean(times)), s.M, s.N, s.eps, None, errs)
        rows.append(row)
        if len(rows) >= 3:
            row.slope_so_far = fit_rate([(q.inv_h, q.rmse) for q in rows])
        if progress:
            progress(f"L={L}: rmse {rmse:.4e}, {row.wall_time_s:.2f}s per run")
    return StudyResult(rows, reference, pilot, schedules, outputs)
