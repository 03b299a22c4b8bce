"""Forward noising, DDIM reverse steps and classifier-free guidance.

Timesteps are 1-based: ``t`` in ``[1, T]`` indexes ``alpha_bars[t - 1]`` and
``t = 0`` denotes the clean signal (``alpha_bar == 1``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericDomainError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar_t`` with the convention ``alpha_bar_0 = 1``."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.num_steps:
            raise ContractError(f"timestep {t} outside [1, {self.num_steps}]")
        return float(self.alpha_bars[t - 1])


def make_linear_schedule(num_steps: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    if num_steps < 1:
        raise ConfigError(f"schedule needs at least one step, got {num_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``; the caller draws ``eps``."""
    if not 1 <= t <= schedule.num_steps:
        raise ContractError(f"timestep {t} outside [1, {schedule.num_steps}]")
    ab = schedule.alpha_bars[t - 1]
    return _combine(x0, eps, ab)


def _combine(x0, eps, ab):
    x0 = np.asarray(x0)
    dtype = np.result_type(x0, eps)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(dtype, copy=False)


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, eta: float,
              schedule: NoiseSchedule, rng: np.random.Generator | None = None,
              x0_range: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """One DDIM update from ``t`` to ``t_prev`` (``t_prev = 0`` returns the x0 estimate).

    With ``x0_range = (lo, hi)`` the x0 estimate is clipped to that box and the
    noise estimate is recomputed from the clipped value, so both terms of the
    update stay consistent with ``x_t``.
    """
    if t_prev == t and eta == 0:
        return x_t
    if t_prev > t:
        raise ContractError(f"DDIM steps must go backwards, got {t} -> {t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ContractError(f"eta must lie in [0, 1], got {eta}")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if x0_range is not None:
        x0_hat = np.clip(x0_hat, *x0_range)
        eps_hat = (x_t - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
    if ab_prev < ab_t:
        raise NumericDomainError(f"alpha_bar falls from t={t} to t_prev={t_prev}; schedule is not monotone")
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    dir_var = 1.0 - ab_prev - sigma**2
    if dir_var < -1e-12:
        raise NumericDomainError(f"negative DDIM direction variance {dir_var} at t={t}")
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(dir_var, 0.0)) * eps_hat
    if eta > 0:
        if rng is None:
            raise ContractError("stochastic DDIM (eta > 0) needs a random generator")
        out = out + sigma * rng.standard_normal(x_t.shape)
    return out.astype(x_t.dtype, copy=False)


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, s: float) -> np.ndarray:
    """Classifier-free guidance; ``s = 1`` and ``s = 0`` return a branch unchanged."""
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ShapeError(f"guidance branches differ: {np.shape(eps_cond)} vs {np.shape(eps_uncond)}")
    if s == 1:
        return eps_cond
    if s == 0:
        return eps_uncond
    return eps_uncond + s * (eps_cond - eps_uncond)


def ddim_timesteps(num_train_steps: int, num_sample_steps: int) -> list[int]:
    """Roughly uniform, strictly descending timesteps from ``T`` down to ``1``."""
    if num_sample_steps < 1:
        raise ConfigError("need at least one sampling step")
    n = min(num_sample_steps, num_train_steps)
    if n == 1:
        return [num_train_steps]
    steps = np.round(np.linspace(num_train_steps, 1, n)).astype(int)
    return [int(s) for s in steps]


def validate_steps(steps: Sequence[int], num_train_steps: int) -> None:
    if not steps:
        raise ContractError("empty step list")
    if any(not 1 <= s <= num_train_steps for s in steps):
        raise ContractError(f"steps must lie in [1, {num_train_steps}]")
    if any(b >= a for a, b in zip(steps[:-1], steps[1:])):
        raise ContractError("steps must be strictly descending")


# ``denoise(latents, t, conditional)`` returns one noise estimate per modality.
Denoiser = Callable[[list[np.ndarray], int, bool], list[np.ndarray]]


def sample_loop(denoise: Denoiser, shapes: Sequence[tuple[int, ...]], steps: Sequence[int],
                schedule: NoiseSchedule, guidance: float = 2.0, eta: float = 0.0,
                seed: int = 0, dtype=np.float32,
                x0_range: tuple[np.ndarray, np.ndarray] | None = None) -> list[np.ndarray]:
    """Synchronised DDIM sampling of every modality from seeded Gaussian noise.

    Each step runs the conditional and the fully condition-dropped branch
    (skipping whichever one guidance makes irrelevant), combines them with
    :func:`cfg_combine` and applies :func:`ddim_step` to every modality with
    the same ``t``. The final step goes to ``t = 0``. ``x0_range`` is passed
    on to every step.
    """
    steps = list(steps)
    validate_steps(steps, schedule.num_steps)
    rng = np.random.default_rng(seed)
    latents = [rng.standard_normal(shape).astype(dtype) for shape in shapes]
    noise_rng = np.random.default_rng([seed, 1]) if eta > 0 else None
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        eps_c = denoise(latents, t, True) if guidance != 0 else None
        eps_u = denoise(latents, t, False) if guidance != 1 else None
        if eps_c is None:
            eps = eps_u
        elif eps_u is None:
            eps = eps_c
        else:
            eps = [cfg_combine(c, u, guidance) for c, u in zip(eps_c, eps_u)]
        latents = [
            ddim_step(x, e, t, t_prev, eta, schedule, noise_rng, x0_range) for x, e in zip(latents, eps)
        ]
    return latents
