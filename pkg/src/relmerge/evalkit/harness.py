"""Object-relevance verification: does noise steered by a relevance map stay in its object?

For every prompt two images are generated with identical seeds: a clean one
and one whose text features receive Gaussian noise in the selected layers.
The per-image score is the mean absolute pixel change inside the target
object's box divided by the change outside it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from ..errors import HarnessError
from ..numkit import Rng, derive_seed
from .bench import GenSettings, generate, sample_seed
from .metrics import STRATEGIES, inject_noise, relevance_ratio

MIN_PROMPTS = 50


@dataclass
class RelevanceExperimentConfig:
    prompts: list                       # BenchItems
    noise_strategy: str = "weighted"
    noise_scale: float = 1.0
    seed: int = 0
    layers: tuple | None = None         # None: every layer
    target: int = 0
    single_step: int | None = None      # inject only at this sampler step
    gen: GenSettings = field(default_factory=GenSettings)
    min_prompts: int = MIN_PROMPTS

    def validate(self):
        if self.noise_strategy not in STRATEGIES:
            raise ValueError(f"noise_strategy must be one of {STRATEGIES}")
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be positive; at zero the ratio is 0/0 for every image")
        if len(self.prompts) < self.min_prompts:
            raise ValueError(f"need at least {self.min_prompts} prompts, got {len(self.prompts)}")
        for it in self.prompts:
            if self.target >= len(it.spec.objects):
                raise ValueError(f"prompt {it.index} has no object {self.target}")


@dataclass
class HarnessResult:
    score: float
    ratios: list                        # per prompt, None where skipped
    skipped: int

    @property
    def skip_rate(self) -> float:
        return self.skipped / len(self.ratios)


def _noise_hook(config: RelevanceExperimentConfig, d_model: int):
    layers = None if config.layers is None else set(config.layers)

    def hook(jobs, step, layer, zt, A):
        if layers is not None and layer not in layers:
            return zt
        if config.single_step is not None and step != config.single_step:
            return zt
        eps = np.stack([Rng(derive_seed(config.seed, "inject", config.prompts[j].index, step, layer))
                        .normal(zt.shape[1:]) for j in jobs]) * config.noise_scale
        return inject_noise(zt, eps, config.noise_strategy, A[:, config.target])

    return hook


def _seeds(config):
    return [sample_seed(config.seed, it.index, 0) for it in config.prompts]


def clean_images(params, cfg, sched, config: RelevanceExperimentConfig) -> np.ndarray:
    g = generate(params, cfg, sched, config.prompts, _seeds(config), config.gen)
    return g.images(cfg)


def relevance_score_harness(params, cfg, sched, config: RelevanceExperimentConfig,
                            clean: np.ndarray | None = None) -> HarnessResult:
    """Mean per-image box/non-box change ratio over the prompts that are not skipped.

    ``clean`` may pass in precomputed noise-free images (same config and seeds).
    """
    config.validate()
    if clean is None:
        clean = clean_images(params, cfg, sched, config)
    noisy = generate(params, cfg, sched, config.prompts, _seeds(config), config.gen,
                     hook=_noise_hook(config, cfg.d_model)).images(cfg)
    ratios = [relevance_ratio(n, c, it.spec.objects[config.target].bbox)
              for n, c, it in zip(noisy, clean, config.prompts)]
    kept = [r for r in ratios if r is not None]
    if not kept:
        raise HarnessError(f"all {len(ratios)} prompts were skipped")
    return HarnessResult(float(np.mean(kept)), ratios, len(ratios) - len(kept))


@dataclass
class StrategyComparison:
    uniform: HarnessResult
    weighted: HarnessResult
    diff_mean: float
    ci_low: float
    ci_high: float
    n_pairs: int


def paired_bootstrap(a, b, *, seed: int = 0, n_resamples: int = 10000, level: float = 0.95):
    """Percentile bootstrap interval for mean(b - a) over paired samples."""
    d = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
    if d.size < 2:
        raise HarnessError("need at least two pairs for a bootstrap interval")
    res = stats.bootstrap((d,), np.mean, n_resamples=n_resamples, confidence_level=level,
                          method="percentile", random_state=np.random.default_rng(seed))
    return float(d.mean()), float(res.confidence_interval.low), float(res.confidence_interval.high)


def compare_strategies(params, cfg, sched, config: RelevanceExperimentConfig) -> StrategyComparison:
    """Run both strategies with shared seeds and noise; bootstrap the per-prompt difference."""
    config.validate()
    clean = clean_images(params, cfg, sched, config)
    res = {s: relevance_score_harness(params, cfg, sched, replace(config, noise_strategy=s), clean)
           for s in STRATEGIES}
    pairs = [(u, w) for u, w in zip(res["uniform"].ratios, res["weighted"].ratios)
             if u is not None and w is not None]
    u, w = zip(*pairs)
    mean, lo, hi = paired_bootstrap(u, w, seed=config.seed)
    return StrategyComparison(res["uniform"], res["weighted"], mean, lo, hi, len(pairs))
