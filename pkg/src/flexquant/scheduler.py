"""Perplexity-entropy (PPLE) driven precision scheduler.

PPLE is the exponential of the next-token distribution's entropy: 1 for a
one-hot prediction, V for a uniform one. The scheduler keeps a sliding
window of PPLE values and, once the window is full and its mean falls
strictly below the threshold, hands out the next plan entries. After a
switch the window is cleared and a cooldown of one window length starts,
so the next decision only sees logits produced at the new precision.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError, StateError
from .tensor_core import as_tensor, softmax

PREFILL = "prefill"
ABSOLUTE = "absolute"


@dataclass(frozen=True)
class SchedulerConfig:
    window_len: int = 20
    theta: float = 1.0
    threshold_mode: str = PREFILL
    layers_per_switch: int = 1

    def __post_init__(self):
        if self.window_len < 1:
            raise ConfigurationError("window_len must be >= 1")
        if self.layers_per_switch < 1:
            raise ConfigurationError("layers_per_switch must be >= 1")
        if self.threshold_mode not in (PREFILL, ABSOLUTE):
            raise ConfigurationError(f"threshold_mode must be {PREFILL!r} or {ABSOLUTE!r}")
        if math.isnan(self.theta) or self.theta < 0:
            raise ConfigurationError("theta must be a nonnegative number")


def ppl_entropy_rows(logits) -> np.ndarray:
    """PPLE of each row of ``logits``."""
    z = as_tensor(logits)
    if z.shape[-1] == 0:
        raise InputError("empty logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=-1)
    # H = log(sum e^z) - sum p*z; underflowed terms contribute exactly 0
    entropy = np.log(total) - (e * z).sum(axis=-1) / total
    return np.exp(np.clip(entropy, 0.0, np.log(z.shape[-1])))


def ppl_entropy(logits) -> float:
    return float(ppl_entropy_rows(as_tensor(logits).reshape(-1)))


def next_token_stats(logits) -> tuple[float, float]:
    """(PPLE, fault tolerance) from a single softmax pass over one logits row."""
    z = as_tensor(logits).reshape(-1)
    if z.size < 2:
        raise InputError("fault tolerance needs at least two candidate tokens")
    z = z - z.max()
    e = np.exp(z)
    total = e.sum()
    entropy = min(max(float(np.log(total) - e.dot(z) / total), 0.0), math.log(z.size))
    top2 = np.partition(e, -2)[-2:]
    return math.exp(entropy), float((top2[1] - top2[0]) / total)


def fault_tolerance(logits) -> float:
    """Gap between the largest and second-largest next-token probability."""
    logits = as_tensor(logits).reshape(-1)
    if logits.size < 2:
        raise InputError("fault tolerance needs at least two candidate tokens")
    p = softmax(logits)
    top2 = np.partition(p, -2)[-2:]
    return float(top2[1] - top2[0])


def derive_threshold(prefill_logits, config: SchedulerConfig = SchedulerConfig()) -> float:
    """Mean PPLE of the last ``min(window_len, n)`` prefill rows, times theta."""
    rows = as_tensor(prefill_logits)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.shape[0] == 0:
        raise StateError("no prefill logits to derive a threshold from")
    if config.theta == 0:
        return 0.0
    tail = rows[-min(config.window_len, rows.shape[0]):]
    return float(np.mean(ppl_entropy_rows(tail))) * config.theta


@dataclass
class SchedulerState:
    config: SchedulerConfig
    plan_len: int
    threshold: float | None = None
    plan_cursor: int = 0
    cooldown_remaining: int = 0
    last_average: float | None = None
    window: deque = field(init=False)

    def __post_init__(self):
        self.window = deque(maxlen=self.config.window_len)

    def set_threshold(self, prefill_logits=None) -> float:
        if self.config.threshold_mode == ABSOLUTE:
            self.threshold = float(self.config.theta)
        else:
            if prefill_logits is None:
                raise StateError("prefill-derived threshold needs prefill logits")
            self.threshold = derive_threshold(prefill_logits, self.config)
        return self.threshold

    @property
    def window_full(self) -> bool:
        return len(self.window) == self.config.window_len

    def moving_average(self) -> float | None:
        if not self.window_full:
            return None
        return float(sum(self.window) / len(self.window))

    def observe(self, value: float) -> range:
        """Feed one PPLE value; returns the plan indices to apply now (often empty)."""
        if self.threshold is None:
            raise StateError("observe() called before a threshold was set")
        self.window.append(float(value))
        if self.cooldown_remaining > 0:
            self.cooldown_remaining -= 1
        avg = self.last_average = self.moving_average()
        if (
            avg is None
            or self.cooldown_remaining
            or not avg < self.threshold
            or self.plan_cursor >= self.plan_len
        ):
            return range(0)
        start = self.plan_cursor
        self.plan_cursor = min(self.plan_len, start + self.config.layers_per_switch)
        self.window.clear()
        self.cooldown_remaining = self.config.window_len
        return range(start, self.plan_cursor)
