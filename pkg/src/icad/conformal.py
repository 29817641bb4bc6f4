"""Conformal detection core.

Offline calibration produces a sorted list of nonconformity scores; at
runtime each input turns into a p-value (fraction of calibration scores at
least as strange), a mixture martingale over recent p-values measures how
implausibly small they have been, and either a CUSUM accumulator or a plain
threshold turns the martingale into alarms.

All martingale arithmetic lives in the log domain: the mixture integral
``M = integral_0^1 prod_i eps * p_i^(eps-1) d eps`` takes astronomically
large values once p-values collapse, so we evaluate
``log M = log integral_0^1 exp(n*log(eps) + (eps-1)*sum_log_p) d eps``
with composite Simpson quadrature and log-sum-exp accumulation. The
integrand depends on the window only through ``sum_log_p``, which is what
makes the recursive sliding-window update exact.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .models import SvddModel, VaeModel
from .neural import Array
from .nonconformity import (
    SvddScorer,
    VaeScorer,
    _check_examples,
    svdd_score,
    vae_score,
)

MIXTURE_GRID_POINTS = 1001

# Number of sliding-window pushes between exact recomputations of the
# running log-p sum (bounds float drift over long streams).
_REFRESH_INTERVAL = 1024


class FingerprintMismatchError(RuntimeError):
    """Calibration scores were produced by a different scorer/model."""

    code = "fingerprint_mismatch"


@dataclass(frozen=True)
class CalibrationSet:
    """Sorted calibration nonconformity scores bound to their scorer."""

    scores: Array
    scorer_kind: str
    fingerprint: bytes

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1 or scores.size < 1:
            raise ValueError("calibration needs at least one score")
        if not np.all(np.isfinite(scores)):
            raise ValueError("calibration scores must be finite")
        if np.any(np.diff(scores) < 0):
            raise ValueError("calibration scores must be sorted ascending")
        scores = scores.copy()
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        if len(self.fingerprint) != 8:
            raise ValueError("fingerprint must be 8 bytes")

    def __len__(self) -> int:
        return int(self.scores.size)


def calibrate(train: Array, m: int, scorer, samples: int = 0, seed: int = 0) -> CalibrationSet:
    """Split a training set and score the calibration portion.

    The first ``m`` examples form the proper training set, the remainder the
    calibration set. ``scorer`` is either a ready scorer (model-backed
    scorers are trained on the proper set elsewhere) or a callable that
    builds one from the proper training set (k-NN/KDE).

    For the VAE scorer the default is one score per calibration example via
    the noise-free mean reconstruction; ``samples > 0`` pools that many
    sampled-reconstruction scores per example instead.
    """
    train = _check_examples(train, "training set")
    l = train.shape[0]
    if not 0 < m < l:
        raise ValueError(f"proper-train size m={m} must satisfy 0 < m < {l}")
    proper, cal_part = train[:m], train[m:]
    if callable(scorer) and not hasattr(scorer, "score"):
        scorer = scorer(proper)
    return calibration_scores(scorer, cal_part, samples=samples, seed=seed)


def calibration_scores(scorer, cal_examples: Array, samples: int = 0, seed: int = 0) -> CalibrationSet:
    """Score each calibration example and return the sorted result."""
    cal_examples = _check_examples(cal_examples, "calibration set")
    if samples < 0:
        raise ValueError("samples must be >= 0")
    if samples > 0:
        if not hasattr(scorer, "score_many"):
            raise ValueError(f"{scorer.kind} scorer does not support sampled calibration")
        rng = np.random.default_rng(seed)
        scores = [s for z in cal_examples for s in scorer.score_many(z, samples, rng)]
    else:
        scores = [scorer.score(z) for z in cal_examples]
    return CalibrationSet(np.sort(np.asarray(scores)), scorer.kind, scorer.fingerprint())


def p_value(score: float, cal: CalibrationSet) -> float:
    """Fraction of calibration scores >= ``score``, floored away from zero.

    The floor ``1/(len(cal)+1)`` is the smallest resolvable nonzero fraction
    and keeps ``log p`` finite for the martingale.
    """
    if not np.isfinite(score):
        raise ValueError("nonconformity score must be finite")
    n = len(cal)
    idx = int(np.searchsorted(cal.scores, score, side="left"))
    raw = (n - idx) / n
    return max(raw, 1.0 / (n + 1))


def power_martingale_log(p_values: Sequence[float], epsilon: float) -> float:
    """Log of the power martingale ``prod_i epsilon * p_i^(epsilon - 1)``."""
    if not 0.0 < epsilon <= 1.0:
        raise ValueError("epsilon must be in (0, 1]")
    total = 0.0
    for p in p_values:
        if not 0.0 < p <= 1.0:
            raise ValueError(f"p-value {p} outside (0, 1]")
        total += math.log(epsilon) + (epsilon - 1.0) * math.log(p)
    return total


def log_simpson_integral(log_f: Callable[[Array], Array], lo: float, hi: float, points: int) -> float:
    """log of ``integral_lo^hi exp(log_f(x)) dx`` by composite Simpson.

    ``log_f`` must be vectorized and may return ``-inf`` where the integrand
    vanishes (e.g. at an endpoint).
    """
    if points < 3 or points % 2 == 0:
        raise ValueError("need an odd number of grid points >= 3")
    grid = np.linspace(lo, hi, points)
    h = (hi - lo) / (points - 1)
    weights = np.full(points, 2.0)
    weights[1::2] = 4.0
    weights[0] = weights[-1] = 1.0
    return float(logsumexp(log_f(grid), b=weights * h / 3.0))


def mixture_martingale_log(window_log_p_sum: float, count: int) -> float:
    """Log of the simple mixture martingale over a window of ``count`` p-values.

    The power martingale is integrated over its exponent on [0, 1]; only the
    window's log-p sum enters, so callers can maintain it recursively.
    """
    if count < 1:
        raise ValueError("window must contain at least one p-value")
    if not np.isfinite(window_log_p_sum) or window_log_p_sum > 1e-12:
        raise ValueError("sum of log p-values must be finite and <= 0")
    s = min(window_log_p_sum, 0.0)

    def integrand(eps: Array) -> Array:
        with np.errstate(divide="ignore"):
            return count * np.log(eps) + (eps - 1.0) * s

    return log_simpson_integral(integrand, 0.0, 1.0, MIXTURE_GRID_POINTS)


def integrate_power_factor(epsilon: float, points: int = 4001) -> float:
    """Quadrature check of the fair-bet identity ``integral_0^1 eps*p^(eps-1) dp``.

    The integrand is singular at p=0, so we substitute s = log p (the exact
    tail below the truncation point is added back analytically). A correct
    implementation returns 1 for every epsilon in (0, 1].
    """
    if not 0.0 < epsilon <= 1.0:
        raise ValueError("epsilon must be in (0, 1]")
    s_lo = -50.0 / epsilon

    def integrand(s: Array) -> Array:
        return np.log(epsilon) + epsilon * s

    body = math.exp(log_simpson_integral(integrand, s_lo, 0.0, points))
    tail = math.exp(epsilon * s_lo)
    return body + tail


class MartingaleState:
    """Sliding window of log p-values with an exactly-maintained running sum."""

    def __init__(self, window_size: int):
        if window_size < 1:
            raise ValueError("window size must be >= 1")
        self.window_size = int(window_size)
        self.window: deque[float] = deque(maxlen=self.window_size)
        self.log_p_sum = 0.0
        self._pushes = 0

    @classmethod
    def warmed_up(cls, window_size: int, rng: np.random.Generator) -> "MartingaleState":
        """Pre-fill the window with independent uniform p-values in (0, 1]."""
        state = cls(window_size)
        for _ in range(window_size):
            state.push(math.log(1.0 - rng.random()))
        return state

    def push(self, log_p: float) -> None:
        if not np.isfinite(log_p) or log_p > 0.0:
            raise ValueError("log p must be finite and <= 0")
        if len(self.window) == self.window.maxlen:
            self.log_p_sum -= self.window[0]
        self.window.append(log_p)
        self.log_p_sum += log_p
        self._pushes += 1
        if self._pushes % _REFRESH_INTERVAL == 0:
            self.log_p_sum = float(sum(self.window))

    def mixture_log(self) -> float:
        return mixture_martingale_log(self.log_p_sum, len(self.window))


STATEFUL_CUSUM = "stateful_cusum"
STATELESS_THRESHOLD = "stateless_threshold"


@dataclass
class DetectorState:
    """Alarm logic state: CUSUM accumulator or plain threshold.

    Thresholds and the CUSUM drift ``delta`` are log-domain quantities,
    matching the log-domain martingale.
    """

    mode: str
    tau: float
    delta: float = 0.0
    s: float = 0.0
    last_m_log: float | None = None

    def __post_init__(self):
        if self.mode not in (STATEFUL_CUSUM, STATELESS_THRESHOLD):
            raise ValueError(f"unknown detector mode {self.mode!r}")
        if self.s < 0.0:
            raise ValueError("CUSUM statistic must be nonnegative")


def cusum_step(state: DetectorState, m_log_prev: float) -> tuple[bool, float]:
    """One CUSUM update with the previous step's log-martingale value.

    Returns ``(alarm, s_value)`` where ``s_value`` is the statistic before
    the post-alarm reset to zero.
    """
    if state.mode != STATEFUL_CUSUM:
        raise ValueError("detector is not in CUSUM mode")
    state.s = max(0.0, state.s + m_log_prev - state.delta)
    s_value = state.s
    alarm = state.s > state.tau
    if alarm:
        state.s = 0.0
    return alarm, s_value


def stateless_step(state: DetectorState, m_log: float) -> bool:
    """Alarm iff the current log-martingale value exceeds the threshold."""
    if state.mode != STATELESS_THRESHOLD:
        raise ValueError("detector is not in stateless mode")
    state.last_m_log = m_log
    return m_log > state.tau


@dataclass(frozen=True)
class VaeStepResult:
    alarm: bool
    scores: tuple[float, ...]
    p_values: tuple[float, ...]
    m_log: float
    s: float

    @property
    def score(self) -> float:
        return float(np.mean(self.scores))


@dataclass(frozen=True)
class SvddStepResult:
    alarm: bool
    score: float
    p: float
    m_log: float
    window_log_p_sum: float


def vae_detect_step(
    z: Array,
    model: VaeModel,
    cal: CalibrationSet,
    n_samples: int,
    detector: DetectorState,
    rng: np.random.Generator,
) -> VaeStepResult:
    """One detection step: sample reconstructions, score, test, accumulate.

    The martingale is taken over the step's own batch of fresh p-values.
    The CUSUM recurrence consumes the martingale of the *previous* step
    (``S_1 = 0``), so the very first call can never alarm.
    """
    if cal.scorer_kind != "vae":
        raise FingerprintMismatchError(
            f"calibration was built with the {cal.scorer_kind!r} scorer, expected 'vae'"
        )
    from .models import sample_reconstructions

    recons = sample_reconstructions(model, z, n_samples, rng)
    scores = tuple(vae_score(np.asarray(z, dtype=np.float64), r) for r in recons)
    p_values = tuple(p_value(s, cal) for s in scores)
    m_log = mixture_martingale_log(sum(math.log(p) for p in p_values), n_samples)
    if detector.last_m_log is None:
        alarm, s_value = False, detector.s
    else:
        alarm, s_value = cusum_step(detector, detector.last_m_log)
    detector.last_m_log = m_log
    return VaeStepResult(alarm, scores, p_values, m_log, s_value)


def svdd_detect_step(
    z: Array,
    model: SvddModel,
    cal: CalibrationSet,
    martingale: MartingaleState,
    detector: DetectorState,
) -> SvddStepResult:
    """One detection step: score, p-value, sliding-window martingale, threshold."""
    if cal.scorer_kind != "svdd":
        raise FingerprintMismatchError(
            f"calibration was built with the {cal.scorer_kind!r} scorer, expected 'svdd'"
        )
    score = svdd_score(model, np.asarray(z, dtype=np.float64))
    p = p_value(score, cal)
    martingale.push(math.log(p))
    m_log = martingale.mixture_log()
    alarm = stateless_step(detector, m_log)
    return SvddStepResult(alarm, score, p, m_log, martingale.log_p_sum)


class VaePipeline:
    """Per-stream VAE detection: owns the detector state and the sampling RNG."""

    method = "vae"

    def __init__(
        self,
        model: VaeModel,
        cal: CalibrationSet,
        n_samples: int = 10,
        delta: float = 6.0,
        tau: float = 156.0,
        seed: int = 0,
    ):
        if n_samples < 1:
            raise ValueError("need at least one reconstruction sample per step")
        expected = VaeScorer(model).fingerprint()
        if cal.fingerprint != expected:
            raise FingerprintMismatchError(
                "calibration fingerprint does not match this VAE model"
            )
        self.model = model
        self.cal = cal
        self.n_samples = int(n_samples)
        self.detector = DetectorState(STATEFUL_CUSUM, tau=tau, delta=delta)
        self._rng = np.random.default_rng(seed)

    def step(self, z: Array) -> VaeStepResult:
        return vae_detect_step(z, self.model, self.cal, self.n_samples, self.detector, self._rng)


class SvddPipeline:
    """Per-stream SVDD detection with a seeded warm-started sliding window."""

    method = "svdd"

    def __init__(
        self,
        model: SvddModel,
        cal: CalibrationSet,
        window: int = 10,
        tau: float = 14.0,
        seed: int = 0,
    ):
        expected = SvddScorer(model).fingerprint()
        if cal.fingerprint != expected:
            raise FingerprintMismatchError(
                "calibration fingerprint does not match this SVDD model"
            )
        self.model = model
        self.cal = cal
        self.martingale = MartingaleState.warmed_up(window, np.random.default_rng(seed))
        self.detector = DetectorState(STATELESS_THRESHOLD, tau=tau)

    def step(self, z: Array) -> SvddStepResult:
        return svdd_detect_step(z, self.model, self.cal, self.martingale, self.detector)
