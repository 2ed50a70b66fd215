from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True)
class DiffusionSchedule:
    """Signal/noise weights for t = 0..T; ``x_t = alpha[t] x0 + sigma[t] eps``."""

    T: int
    alpha: np.ndarray
    sigma: np.ndarray


def make_schedule(T: int = 1000) -> DiffusionSchedule:
    """Linear-beta DDPM schedule with beta running from 1e-4 to 0.02."""
    if T < 1:
        raise ValueError("T must be at least 1")
    betas = np.linspace(BETA_START, BETA_END, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule(T, np.sqrt(alpha_bar), np.sqrt(1.0 - alpha_bar))


def add_noise(x0, eps, t, sched: DiffusionSchedule):
    """alpha_t x0 + sigma_t eps; ``t`` is an int or one step per leading batch entry."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > sched.T):
        raise ValueError(f"timestep outside [0, {sched.T}]")
    a = sched.alpha[t_arr].astype(x0.dtype)
    s = sched.sigma[t_arr].astype(x0.dtype)
    if t_arr.ndim:
        extra = (1,) * (x0.ndim - 1)
        a = a.reshape(a.shape + extra)
        s = s.reshape(s.shape + extra)
    return a * x0 + s * eps
