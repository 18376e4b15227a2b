"""Noise schedule, closed-form forward noising and the deterministic DDIM
reverse pass with a per-step embedding schedule."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DenoiserFn = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


class DiffusionError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """``alpha_bar[t]`` is the cumulative signal retention; index 0 is 1."""

    T: int
    beta: np.ndarray  # beta[t-1] is the step-t variance
    alpha_bar: np.ndarray  # length T+1
    beta_start: float = float("nan")
    beta_end: float = float("nan")

    def params(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise DiffusionError(f"timestep {t} outside [1, {self.T}]")


def make_schedule(T: int = 50, beta_start: float = 0.001, beta_end: float = 0.2) -> NoiseSchedule:
    if T < 2:
        raise DiffusionError("T must be at least 2")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise DiffusionError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T)
    return schedule_from_alpha_bar(np.concatenate([[1.0], np.cumprod(1.0 - beta)]),
                                   beta_start, beta_end, beta=beta)


def schedule_from_alpha_bar(alpha_bar, beta_start=float("nan"), beta_end=float("nan"),
                            beta=None) -> NoiseSchedule:
    """Build a schedule directly from ``alpha_bar[0..T]`` (used for hand fixtures).

    Non-increasing sequences are accepted so the degenerate equal-alpha step
    can be expressed.
    """
    ab = np.asarray(alpha_bar, dtype=np.float64)
    if ab.ndim != 1 or ab.size < 2 or ab[0] != 1.0:
        raise DiffusionError("alpha_bar must start at 1 and have T+1 >= 2 entries")
    if np.any(ab[1:] <= 0) or np.any(np.diff(ab) > 0):
        raise DiffusionError("alpha_bar must be positive and non-increasing")
    if beta is None:
        beta = 1.0 - ab[1:] / ab[:-1]
    return NoiseSchedule(ab.size - 1, np.asarray(beta), ab, beta_start, beta_end)


def gamma(schedule: NoiseSchedule, t: int) -> tuple[float, float]:
    """DDIM step coefficients ``(g0, g1)`` so ``x_{t-1} = g0 x_t + g1 eps``."""
    schedule.check_step(t)
    a_prev, a_t = schedule.alpha_bar[t - 1], schedule.alpha_bar[t]
    ratio = a_prev / a_t
    radicand = ratio - a_prev
    # a_prev/a_t - a_prev = a_prev (1 - a_t)/a_t >= 0 while a_t <= 1
    assert radicand >= -1e-15, radicand
    g0 = float(np.sqrt(ratio))
    g1 = float(np.sqrt(1.0 - a_prev) - np.sqrt(max(radicand, 0.0)))
    return g0, g1


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise DiffusionError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form ``x_t``. ``t`` may be an int or one step per leading-axis sample."""
    _same_shape(x0, eps, "forward_noise")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise DiffusionError(f"timestep outside [1, {schedule.T}]")
    ab = schedule.alpha_bar[t_arr]
    if t_arr.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    _same_shape(x_t, eps_hat, "ddim_step")
    g0, g1 = gamma(schedule, t)
    return g0 * x_t + g1 * eps_hat


def oracle_denoiser(x0: np.ndarray, schedule: NoiseSchedule) -> DenoiserFn:
    """Returns the exact noise that makes ``x_t`` consistent with ``x0``."""

    def fn(x_t, t, e):
        ab = schedule.alpha_bar[t]
        return (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)

    return fn


@dataclass
class GenerationTrace:
    latents: list  # X_T, X_{T-1}, ..., X_0
    steps: list  # T, T-1, ..., 1 (the step that produced latents[i+1])
    embeddings: list  # embedding used at each entry of ``steps``

    def __len__(self) -> int:
        return len(self.latents)


def generate(x_T: np.ndarray, embedding_schedule: Sequence[np.ndarray], denoiser: DenoiserFn,
             schedule: NoiseSchedule, keep_trace: bool = True):
    """Run the reverse pass; ``embedding_schedule[t-1]`` conditions step ``t``.

    Returns ``(x_0, trace)``. ``x_T`` may carry a leading batch axis; the
    denoiser receives it unchanged.
    """
    if len(embedding_schedule) != schedule.T:
        raise DiffusionError(
            f"embedding schedule has {len(embedding_schedule)} entries, expected {schedule.T}")
    x = np.asarray(x_T, dtype=np.float64)
    trace = GenerationTrace([x], [], []) if keep_trace else None
    for t in range(schedule.T, 0, -1):
        e = embedding_schedule[t - 1]
        x = ddim_step(x, t, denoiser(x, t, e), schedule)
        if trace is not None:
            trace.latents.append(x)
            trace.steps.append(t)
            trace.embeddings.append(e)
    return x, trace
