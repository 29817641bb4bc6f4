"""Synthetic drift episodes: data generator, harness, metrics, benchmarks.

The scene is a stand-in for camera frames at desk scale: a bright disk with
random position and radius (nuisance variation the detectors must tolerate)
on a noisy background, corrupted by precipitation-like effects (rain
streaks plus a global veil) whose strength grows linearly with a scalar
level ``r``. Training data uses ``r`` in [0, 20]; an episode is
ground-truth out-of-distribution as soon as its schedule pushes ``r``
past 20.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .conformal import (
    STATEFUL_CUSUM,
    STATELESS_THRESHOLD,
    DetectorState,
    cusum_step,
    stateless_step,
)
from .neural import Array

OOD_THRESHOLD = 20.0

IN_DIST = "in_dist"
OOD = "ood"

TRUE_POSITIVE = "true_positive"
FALSE_POSITIVE = "false_positive"
TRUE_NEGATIVE = "true_negative"
FALSE_NEGATIVE = "false_negative"


@dataclass(frozen=True)
class DriftSchedule:
    """Piecewise-linear corruption level: flat, ramp, plateau."""

    r0: float
    t0: int
    t1: int
    beta: float

    def __post_init__(self):
        if self.t0 >= self.t1:
            raise ValueError("ramp must start before it ends (t0 < t1)")
        if self.r0 < 0.0 or self.beta < 0.0:
            raise ValueError("initial level and slope must be nonnegative")

    def value(self, t: int) -> float:
        if t < 0:
            raise ValueError("time step must be >= 0")
        if t < self.t0:
            return self.r0
        if t <= self.t1:
            return self.r0 + self.beta * (t - self.t0)
        return self.plateau

    @property
    def plateau(self) -> float:
        return self.r0 + self.beta * (self.t1 - self.t0)

    def onset_step(self) -> int | None:
        """First step with corruption strictly above the training bound."""
        if self.value(0) > OOD_THRESHOLD:
            return 0
        if self.plateau <= OOD_THRESHOLD:
            return None
        t = self.t0
        while self.value(t) <= OOD_THRESHOLD:
            t += 1
        return t


def sample_schedule(rng: np.random.Generator) -> DriftSchedule:
    """Draw a schedule from the standard ranges: r0 ~ U[0,10], t0 in {10..30},
    t1 in {90..110}, slope in [0.1, 0.5]."""
    return DriftSchedule(
        r0=float(rng.uniform(0.0, 10.0)),
        t0=int(rng.integers(10, 31)),
        t1=int(rng.integers(90, 111)),
        beta=float(rng.uniform(0.1, 0.5)),
    )


def sample_schedule_labeled(
    rng: np.random.Generator, ood: bool, ood_margin: float = 0.0
) -> DriftSchedule:
    """Rejection-sample a schedule with the requested ground-truth label.

    ``ood_margin`` requires OOD plateaus to clear the training bound by at
    least that much, which keeps suites away from undetectable borderline
    episodes (a plateau of 20.01 is out-of-distribution in name only).
    """
    for _ in range(10000):
        sched = sample_schedule(rng)
        if ood and sched.plateau > OOD_THRESHOLD + ood_margin:
            return sched
        if not ood and sched.plateau <= OOD_THRESHOLD:
            return sched
    raise RuntimeError("could not sample a schedule with the requested label")


@dataclass(frozen=True)
class SceneGenerator:
    """Disk-plus-rain image generator; flattened frames are the examples.

    The corruption level ``r`` drives two precipitation-like effects: an
    additive grey veil over the whole frame (``haze_rate * r * haze_value``)
    and rain streaks whose expected count is ``streak_rate * r``. At
    ``r = 0`` the frame is the uncorrupted scene.
    """

    side: int = 16
    seed: int = 0
    background: float = 0.1
    disk_value: float = 0.9
    noise_sigma: float = 0.02
    streak_rate: float = 0.4
    streak_value: float = 0.5
    streak_length: int = 4
    haze_rate: float = 0.006
    haze_value: float = 0.7

    def __post_init__(self):
        if self.side < 4:
            raise ValueError("image side must be at least 4")
        if self.streak_length > self.side:
            raise ValueError("streak length exceeds the image side")

    @property
    def dim(self) -> int:
        return self.side * self.side

    def _radius_range(self) -> tuple[float, float]:
        return 0.2 * self.side, 0.3 * self.side

    def example(self, r: float, rng: np.random.Generator) -> Array:
        """Render one frame at corruption level ``r`` and flatten it.

        Streak count is ``floor(rate*r)`` plus a Bernoulli on the fractional
        part, so the expected count is exactly ``rate*r`` (zero at r=0).
        """
        if r < 0.0:
            raise ValueError("corruption level must be nonnegative")
        side = self.side
        img = np.full((side, side), self.background)
        rad_lo, rad_hi = self._radius_range()
        rad = rng.uniform(rad_lo, rad_hi)
        cy = rng.uniform(rad, side - rad)
        cx = rng.uniform(rad, side - rad)
        yy, xx = np.ogrid[:side, :side]
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad] = self.disk_value
        if self.noise_sigma > 0.0:
            img += rng.normal(0.0, self.noise_sigma, size=(side, side))
        haze = min(1.0, self.haze_rate * r)
        if haze > 0.0:
            img = img + haze * self.haze_value
        expected = self.streak_rate * r
        n_streaks = int(expected) + (1 if rng.random() < expected - int(expected) else 0)
        for _ in range(n_streaks):
            col = int(rng.integers(0, side))
            row = int(rng.integers(0, side - self.streak_length + 1))
            for i in range(self.streak_length):
                rr = row + i
                cc = min(side - 1, col + i // 2)
                img[rr, cc] += self.streak_value
        np.clip(img, 0.0, 1.0, out=img)
        return img.reshape(-1)

    def examples(self, r_values: Sequence[float], rng: np.random.Generator) -> Array:
        return np.stack([self.example(r, rng) for r in r_values])


def generate_dataset(
    gen: SceneGenerator, count: int, r_range: tuple[float, float]
) -> tuple[Array, Array]:
    """Deterministically generate ``count`` examples with r ~ U[r_range].

    Returns ``(examples, r_values)``; reproducible from the generator's seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = r_range
    if lo < 0.0 or hi < lo:
        raise ValueError("invalid corruption range")
    rng = np.random.default_rng(gen.seed)
    r_values = rng.uniform(lo, hi, size=count)
    return gen.examples(r_values, rng), r_values


def schedule_value(schedule: DriftSchedule, t: int) -> float:
    return schedule.value(t)


@dataclass(frozen=True)
class EpisodeResult:
    label: str
    alarm_step: int | None
    onset_step: int | None
    verdict: str
    delay_frames: int | None


@dataclass(frozen=True)
class StepRecord:
    step: int
    r: float
    score: float
    p_values: tuple[float, ...]
    m_log: float
    s: float
    alarm: bool


def _classify(label: str, onset: int | None, alarm: int | None) -> tuple[str, int | None]:
    if alarm is None:
        return (FALSE_NEGATIVE, None) if label == OOD else (TRUE_NEGATIVE, None)
    if onset is not None and alarm >= onset:
        return TRUE_POSITIVE, alarm - onset
    return FALSE_POSITIVE, None


def run_episode(
    gen: SceneGenerator,
    schedule: DriftSchedule,
    pipeline,
    max_steps: int = 150,
    seed: int = 0,
) -> tuple[EpisodeResult, list[StepRecord]]:
    """Stream one episode through a detection pipeline, stopping at the first
    alarm. The ground-truth label depends only on the schedule and horizon."""
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    rng = np.random.default_rng(seed)
    onset = schedule.onset_step()
    if onset is not None and onset >= max_steps:
        onset = None
    label = OOD if onset is not None else IN_DIST
    records: list[StepRecord] = []
    alarm_step: int | None = None
    for t in range(max_steps):
        r = schedule.value(t)
        z = gen.example(r, rng)
        res = pipeline.step(z)
        if hasattr(res, "p_values"):
            p_vals, s_col = res.p_values, res.s
        else:
            p_vals, s_col = (res.p,), res.window_log_p_sum
        records.append(StepRecord(t, r, res.score, p_vals, res.m_log, s_col, res.alarm))
        if res.alarm:
            alarm_step = t
            break
    verdict, delay = _classify(label, onset, alarm_step)
    return EpisodeResult(label, alarm_step, onset, verdict, delay), records


@dataclass(frozen=True)
class SuiteMetrics:
    results: tuple[EpisodeResult, ...]

    @property
    def false_positives(self) -> int:
        return sum(r.verdict == FALSE_POSITIVE for r in self.results)

    @property
    def false_negatives(self) -> int:
        return sum(r.verdict == FALSE_NEGATIVE for r in self.results)

    @property
    def in_dist_count(self) -> int:
        return sum(r.label == IN_DIST for r in self.results)

    @property
    def ood_count(self) -> int:
        return sum(r.label == OOD for r in self.results)

    @property
    def mean_delay(self) -> float | None:
        delays = [r.delay_frames for r in self.results if r.delay_frames is not None]
        return float(np.mean(delays)) if delays else None


def run_suite(
    gen: SceneGenerator,
    schedules: Sequence[DriftSchedule],
    pipeline_factory: Callable[[], object],
    max_steps: int = 150,
    seed: int = 0,
) -> tuple[SuiteMetrics, list[list[StepRecord]]]:
    """Run independent episodes (fresh pipeline each) and aggregate verdicts."""
    results = []
    diagnostics = []
    for i, sched in enumerate(schedules):
        res, records = run_episode(gen, sched, pipeline_factory(), max_steps, seed=seed + i)
        results.append(res)
        diagnostics.append(records)
    return SuiteMetrics(tuple(results)), diagnostics


def make_suite_schedules(
    count: int, ood_fraction: float, seed: int, ood_margin: float = 0.0
) -> list[DriftSchedule]:
    """A reproducible episode mix: the first ceil(count*fraction) are OOD."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= ood_fraction <= 1.0:
        raise ValueError("ood fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    n_ood = int(round(count * ood_fraction))
    flags = [True] * n_ood + [False] * (count - n_ood)
    return [sample_schedule_labeled(rng, flag, ood_margin) for flag in flags]


def alarm_step_from_trace(
    m_logs: Sequence[float], mode: str, tau: float, delta: float = 0.0
) -> int | None:
    """Replay detector logic over a recorded log-martingale trace.

    Uses the same step functions as the live pipelines, including the CUSUM
    one-step lag, so threshold tuning on traces matches live runs exactly.
    """
    if mode == STATEFUL_CUSUM:
        det = DetectorState(STATEFUL_CUSUM, tau=tau, delta=delta)
        for t in range(len(m_logs)):
            if t == 0:
                continue
            alarm, _ = cusum_step(det, m_logs[t - 1])
            if alarm:
                return t
        return None
    if mode == STATELESS_THRESHOLD:
        det = DetectorState(STATELESS_THRESHOLD, tau=tau)
        for t, m in enumerate(m_logs):
            if stateless_step(det, m):
                return t
        return None
    raise ValueError(f"unknown detector mode {mode!r}")


@dataclass(frozen=True)
class Trace:
    m_logs: tuple[float, ...]
    onset_step: int | None
    label: str


def collect_traces(
    gen: SceneGenerator,
    schedules: Sequence[DriftSchedule],
    pipeline_factory: Callable[[], object],
    max_steps: int = 150,
    seed: int = 0,
) -> list[Trace]:
    """Run episodes to the full horizon (alarms disabled) recording log M."""

    traces = []
    for i, sched in enumerate(schedules):
        pipeline = pipeline_factory()
        pipeline.detector.tau = math.inf
        _, records = run_episode(gen, sched, pipeline, max_steps, seed=seed + i)
        onset = sched.onset_step()
        if onset is not None and onset >= max_steps:
            onset = None
        label = OOD if onset is not None else IN_DIST
        traces.append(Trace(tuple(rec.m_log for rec in records), onset, label))
    return traces


@dataclass(frozen=True)
class GridPoint:
    delta: float | None
    tau: float
    false_positives: int
    false_negatives: int
    mean_delay: float | None
    objective: float


def tune_thresholds(
    traces: Sequence[Trace],
    mode: str,
    taus: Sequence[float],
    deltas: Sequence[float] | None = None,
) -> tuple[GridPoint | None, list[GridPoint]]:
    """Grid-search detector thresholds on recorded traces.

    Feasible points have zero false positives; among them the winner
    minimizes (false negatives, mean delay with misses charged the full
    remaining horizon). Returns ``(best_or_None, all_points)``.
    """
    if mode == STATEFUL_CUSUM:
        if not deltas:
            raise ValueError("CUSUM tuning needs a delta grid")
        grid = [(d, t) for d in deltas for t in taus]
    else:
        grid = [(None, t) for t in taus]
    points: list[GridPoint] = []
    for delta, tau in grid:
        fp = fn = 0
        tp_delays: list[float] = []
        padded: list[float] = []
        for trace in traces:
            alarm = alarm_step_from_trace(
                trace.m_logs, mode, tau, delta if delta is not None else 0.0
            )
            verdict, delay = _classify(trace.label, trace.onset_step, alarm)
            if verdict == FALSE_POSITIVE:
                fp += 1
            elif verdict == FALSE_NEGATIVE:
                fn += 1
                padded.append(float(len(trace.m_logs) - trace.onset_step))
            elif verdict == TRUE_POSITIVE:
                tp_delays.append(float(delay))
                padded.append(float(delay))
        objective = float(np.mean(padded)) if padded else 0.0
        mean_delay = float(np.mean(tp_delays)) if tp_delays else None
        points.append(GridPoint(delta, tau, fp, fn, mean_delay, objective))
    feasible = [p for p in points if p.false_positives == 0]
    best = min(feasible, key=lambda p: (p.false_negatives, p.objective)) if feasible else None
    return best, points


def quartiles(values: Sequence[float]) -> tuple[float, float, float, float, float]:
    """(min, Q1, median, Q3, max) with linear interpolation."""
    q = np.percentile(np.asarray(values, dtype=np.float64), [0, 25, 50, 75, 100])
    return tuple(float(v) for v in q)


@dataclass(frozen=True)
class TimingRow:
    method: str
    n: int
    min_ms: float
    q1_ms: float
    q2_ms: float
    q3_ms: float
    max_ms: float


def benchmark_timing(
    pipeline_factory: Callable[[int], object],
    gen: SceneGenerator,
    n_values: Sequence[int],
    steps: int = 1000,
    warmup: int = 50,
    r_range: tuple[float, float] = (0.0, 20.0),
    seed: int = 0,
) -> list[TimingRow]:
    """Wall-clock per detection step, quartiles over ``steps`` measurements.

    One row per window/sample count, all fed the same pre-generated
    in-distribution stream. Measurements are interleaved round-robin across
    the configurations so process-level throughput drift (cache and
    frequency warm-up) does not bias one configuration against another.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    r_values = rng.uniform(r_range[0], r_range[1], size=warmup + steps)
    stream = gen.examples(r_values, rng)
    pipelines = [pipeline_factory(n) for n in n_values]
    for pipeline in pipelines:
        for z in stream[:warmup]:
            pipeline.step(z)
    times_ms = np.empty((len(pipelines), steps))
    for i, z in enumerate(stream[warmup:]):
        for j, pipeline in enumerate(pipelines):
            start = time.perf_counter()
            pipeline.step(z)
            times_ms[j, i] = (time.perf_counter() - start) * 1e3
    rows = []
    for j, (n, pipeline) in enumerate(zip(n_values, pipelines)):
        mn, q1, q2, q3, mx = quartiles(times_ms[j])
        rows.append(TimingRow(pipeline.method, int(n), mn, q1, q2, q3, mx))
    return rows
