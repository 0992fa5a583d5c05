"""Noise schedule, forward noising, ancestral reverse step and the one-step sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .nn import Rng, ShapeError

ALPHA_BAR_FLOOR = 1e-8


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule. ``alpha_bar[0]`` is 1 so index t maps to step t."""

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray       # index 1..T, betas[0] unused (0)
    alphas: np.ndarray
    alpha_bar: np.ndarray

    def ab(self, t) -> float:
        return float(self.alpha_bar[t])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.zeros(T + 1)
    betas[1:] = np.linspace(beta_start, beta_end, T) if T > 1 else beta_start
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)  # alphas[0] = 1 so alpha_bar[0] = 1
    return NoiseSchedule(T, beta_start, beta_end, betas, alphas, alpha_bar)


def _check_t(t: int, s: NoiseSchedule) -> None:
    if not 1 <= t <= s.T:
        raise ScheduleError(f"timestep {t} outside [1, {s.T}]")


def _coef(values, like: torch.Tensor) -> torch.Tensor:
    """Per-sample coefficient broadcastable over an N×C×H×W tensor."""
    c = torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=like.dtype)
    return c.reshape(-1, *([1] * (like.dim() - 1))) if c.dim() else c


def forward_diffuse(y0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """y_t = sqrt(ab_t) y0 + sqrt(1 - ab_t) eps. ``t`` may be an int or one int per sample."""
    if eps.shape != y0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(y0.shape)}")
    ts = np.atleast_1d(np.asarray(t))
    for ti in ts:
        _check_t(int(ti), s)
    ab = s.alpha_bar[np.asarray(t)]
    return _coef(np.sqrt(ab), y0) * y0 + _coef(np.sqrt(1 - ab), y0) * eps


def posterior_mean_var(y_t: torch.Tensor, eps_hat: torch.Tensor, t: int, s: NoiseSchedule):
    if t < 1:
        raise ScheduleError("reverse step undefined at t = 0")
    _check_t(t, s)
    a, ab, ab_prev, beta = s.alphas[t], s.alpha_bar[t], s.alpha_bar[t - 1], s.betas[t]
    mean = (y_t - ((1 - a) / np.sqrt(1 - ab)) * eps_hat) / np.sqrt(a)
    var = (1 - ab_prev) / (1 - ab) * beta
    return mean, var


def reverse_step(y_t: torch.Tensor, eps_hat: torch.Tensor, t: int, s: NoiseSchedule,
                 rng: Rng | None) -> torch.Tensor:
    """One ancestral step y_t -> y_{t-1}; deterministic at t = 1 where the variance is 0."""
    mean, var = posterior_mean_var(y_t, eps_hat, t, s)
    if var == 0.0:
        return mean
    if rng is None:
        raise ValueError("reverse_step needs an Rng for t > 1")
    return mean + np.sqrt(var) * rng.normal(y_t.shape, y_t.dtype)


def noise_prediction_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return torch.mean((eps - eps_hat) ** 2)


def one_step_sample(y_t: torch.Tensor, eps_hat: torch.Tensor, t: int, s: NoiseSchedule) -> torch.Tensor:
    """Clean-latent estimate (y_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)."""
    _check_t(t, s)
    ab = s.alpha_bar[t]
    if ab <= ALPHA_BAR_FLOOR:
        raise ScheduleError(f"alpha_bar[{t}] = {ab:.3g} is below the usable floor {ALPHA_BAR_FLOOR}")
    return (y_t - np.sqrt(1 - ab) * eps_hat) / np.sqrt(ab)


def sub_schedule(t_start: int, n: int) -> list[int]:
    """``n`` evenly spaced timesteps from ``t_start`` down to 1 (inclusive)."""
    if n < 1:
        raise ScheduleError("need at least one step")
    if n > t_start:
        raise ScheduleError(f"{n} steps do not fit below t = {t_start}")
    ts = np.round(np.linspace(t_start, 1, n)).astype(int) if n > 1 else np.array([t_start])
    return [int(t) for t in ts]


def strided_step(y_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int,
                 s: NoiseSchedule, rng: Rng | None) -> torch.Tensor:
    """Ancestral step between two timesteps of a strided sub-schedule.

    With ``t_prev = t - 1`` this is exactly :func:`reverse_step`; larger jumps use
    the effective per-jump alpha ab_t / ab_prev. ``t_prev = 0`` returns the
    clean estimate.
    """
    if t_prev == t - 1:
        return reverse_step(y_t, eps_hat, t, s, rng)
    ab, ab_prev = s.alpha_bar[t], s.alpha_bar[t_prev]
    a = ab / ab_prev
    beta = 1 - a
    mean = (y_t - (beta / np.sqrt(1 - ab)) * eps_hat) / np.sqrt(a)
    var = (1 - ab_prev) / (1 - ab) * beta
    if var == 0.0:
        return mean
    return mean + np.sqrt(var) * rng.normal(y_t.shape, y_t.dtype)
