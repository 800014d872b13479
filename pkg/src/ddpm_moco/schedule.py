"""Diffusion noise schedule and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances ``beta``, ``a = 1 - beta`` and cumulative ``a_bar``.

    Arrays are indexed by ``t - 1`` for ``t = 1..T``; :meth:`a_bar_at` also
    accepts ``t = 0`` and returns 1.
    """

    beta: np.ndarray
    a: np.ndarray
    a_bar: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def a_bar_at(self, t):
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.a_bar[np.maximum(t, 1) - 1])

    def a_at(self, t):
        return self.a[np.asarray(t) - 1]

    def beta_at(self, t):
        return self.beta[np.asarray(t) - 1]

    def check_step(self, t, lo: int = 1) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < lo or t.max() > self.T):
            raise ParameterError(f"step must lie in [{lo}, {self.T}], got {t.min()}..{t.max()}")

    def sections(self) -> dict[str, np.ndarray]:
        return {"beta": self.beta, "a": self.a, "a_bar": self.a_bar}

    @classmethod
    def from_beta(cls, beta: np.ndarray) -> NoiseSchedule:
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0:
            raise ParameterError("beta must be a non-empty vector")
        if not ((beta > 0) & (beta < 1)).all():
            raise ParameterError("every beta_t must lie in (0, 1)")
        a = 1.0 - beta
        return cls(beta=beta, a=a, a_bar=np.cumprod(a))

    @classmethod
    def from_sections(cls, sections) -> NoiseSchedule:
        return cls(beta=sections["beta"], a=sections["a"], a_bar=sections["a_bar"])


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_beta(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def cosine_lr(current_steps: int, total_steps: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * current/total)) / 2."""
    if total_steps < 1:
        raise ParameterError(f"total_steps must be >= 1, got {total_steps}")
    if lr0 <= 0:
        raise ParameterError(f"lr0 must be positive, got {lr0}")
    if not 0 <= current_steps <= total_steps:
        raise ParameterError(f"current_steps {current_steps} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * current_steps / total_steps))


@dataclass(frozen=True)
class LrSchedule:
    """Cosine decay, counted in optimizer steps or in epochs.

    In ``"epoch"`` granularity the rate is held constant within an epoch and
    decays over ``ceil(total_steps / steps_per_epoch)`` epochs.
    """

    lr0: float
    total_steps: int
    granularity: str = "step"
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.lr0 <= 0 or self.total_steps < 1:
            raise ParameterError("need lr0 > 0 and total_steps >= 1")
        if self.granularity not in ("step", "epoch"):
            raise ParameterError(f"granularity must be 'step' or 'epoch', got {self.granularity!r}")
        if self.steps_per_epoch < 1:
            raise ParameterError("steps_per_epoch must be >= 1")

    def __call__(self, step: int) -> float:
        if self.granularity == "step":
            return cosine_lr(step, self.total_steps, self.lr0)
        epochs = -(-self.total_steps // self.steps_per_epoch)
        return cosine_lr(min(step // self.steps_per_epoch, epochs), epochs, self.lr0)
