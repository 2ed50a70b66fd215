"""Classifier-free guided DDIM sampling (eta = 0).

``ddim_sample`` drives any object with
``predict(x_t, t, cond, *, step, conditional) -> eps`` and
``null_conditions(cond)``; :class:`Denoiser` adapts trained parameters to it,
and tests plug in an exact-noise oracle.
"""
from __future__ import annotations

import numpy as np

from ..numkit import Rng, derive_seed
from .model import Conditions, DenoiserConfig, ForwardOptions, forward, unconditional
from .schedule import DiffusionSchedule, add_noise


def cfg_combine(eps_uncond, eps_cond, scale: float):
    """eps_u + scale * (eps_c - eps_u); scale 1 returns ``eps_cond`` exactly."""
    eps_cond = np.asarray(eps_cond)
    if scale == 1:
        return eps_cond.copy()
    eps_uncond = np.asarray(eps_uncond)
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shapes differ: {eps_uncond.shape} vs {eps_cond.shape}")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_timesteps(t_start: int, steps: int) -> list[int]:
    """Descending uniform-stride subset of [1, t_start] beginning at ``t_start``."""
    if steps < 1 or steps > t_start:
        raise ValueError(f"steps must be in [1, {t_start}], got {steps}")
    return [(k * t_start) // steps for k in range(steps, 0, -1)]


def initial_noise(seeds, shape) -> np.ndarray:
    """One standard-normal draw of ``shape`` per seed, stacked."""
    return np.stack([Rng(int(s)).normal(shape) for s in seeds])


def sample_seeds(seed: int, n: int) -> list[int]:
    return [derive_seed(seed, "sample", i) for i in range(n)]


def ddim_sample(model, sched: DiffusionSchedule, cond, steps: int = 50, scale: float = 7.5,
                seeds=0, *, shape=None, x_init=None, t_start: int | None = None,
                clip_x0: float | None = None, callback=None) -> np.ndarray:
    """Deterministic DDIM from ``t_start`` (default T) down to 0.

    ``seeds`` is an int (expanded to per-sample seeds) or one seed per sample;
    sample b's starting noise depends only on its own seed. With ``x_init``
    the chain starts from ``x_init`` noised to ``t_start`` instead of pure
    noise. ``steps`` is capped at ``t_start``. ``clip_x0`` clamps each
    predicted x0 to [-clip, clip].
    """
    if not 1 <= steps <= sched.T:
        raise ValueError(f"steps must be in [1, {sched.T}], got {steps}")
    t_start = sched.T if t_start is None else int(t_start)
    if not 1 <= t_start <= sched.T:
        raise ValueError(f"t_start must be in [1, {sched.T}]")
    if x_init is not None:
        x_init = np.asarray(x_init, dtype=np.float64)
        shape = x_init.shape[1:]
        B = x_init.shape[0]
    else:
        if shape is None:
            raise ValueError("need shape or x_init")
        B = getattr(cond, "batch", None)
        if B is None:
            B = len(seeds)
    if isinstance(seeds, (int, np.integer)):
        seeds = sample_seeds(int(seeds), B)
    if len(seeds) != B:
        raise ValueError(f"{len(seeds)} seeds for {B} samples")
    noise = initial_noise(seeds, tuple(shape))
    x = noise if x_init is None else add_noise(x_init, noise, t_start, sched)
    null = model.null_conditions(cond) if scale != 1 else None
    ts = ddim_timesteps(t_start, min(steps, t_start))
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_c = np.asarray(model.predict(x, t, cond, step=i, conditional=True), dtype=np.float64)
        if scale != 1:
            eps_u = np.asarray(model.predict(x, t, null, step=i, conditional=False), dtype=np.float64)
            eps = cfg_combine(eps_u, eps_c, scale)
        else:
            eps = eps_c
        a, s = sched.alpha[t], sched.sigma[t]
        x0 = (x - s * eps) / a
        if clip_x0 is not None:
            x0 = np.clip(x0, -clip_x0, clip_x0)
            eps = (x - a * x0) / s
        x = sched.alpha[t_prev] * x0 + sched.sigma[t_prev] * eps
        if callback is not None:
            callback(i, t, x0)
    return x


class Denoiser:
    """Trained parameters behind the sampler's model interface.

    ``text_hook(step, layer, z_text, relevance) -> z_text`` runs on the
    conditional branch only; ``hook_steps`` limits it to those sampler steps.
    ``freeze_relevance`` records relevance maps at step 0 and reuses them.
    ``record`` keeps the conditional branch's relevance maps per step.
    """

    def __init__(self, params, cfg: DenoiserConfig, merge_mode: str | None = None, *,
                 text_hook=None, hook_steps=None, weight_override=None,
                 freeze_relevance: bool = False, record: bool = False):
        self.params, self.cfg = params, cfg
        self.merge_mode = merge_mode
        self.text_hook = text_hook
        self.hook_steps = None if hook_steps is None else set(hook_steps)
        self.weight_override = weight_override
        self.freeze_relevance = freeze_relevance
        self.record = record
        self.frozen = None
        self.relevance_log: list = []

    def null_conditions(self, cond: Conditions) -> Conditions:
        return unconditional(cond)

    def predict(self, x_t, t, cond: Conditions, *, step: int = 0, conditional: bool = True):
        B = x_t.shape[0]
        opts = ForwardOptions(merge_mode=self.merge_mode)
        tr = np.full(B, t, dtype=np.int64)
        if conditional:
            opts.weight_override = self.weight_override
            if self.text_hook is not None and (self.hook_steps is None or step in self.hook_steps):
                opts.text_hook = lambda layer, zt, A: self.text_hook(step, layer, zt, A)
            if self.freeze_relevance and step > 0 and self.frozen is not None:
                opts.relevance_override = self.frozen
            if self.record or (self.freeze_relevance and step == 0):
                opts.trace = {}
            if step == 0:
                self.relevance_log = []
        eps, _ = forward(self.params, self.cfg, x_t, tr, cond, opts)
        if opts.trace is not None:
            maps = opts.trace["relevance"]
            if self.freeze_relevance and step == 0:
                self.frozen = maps
            if self.record:
                self.relevance_log.append(maps)
        return eps
