"""Evaluation prompts and batched image generation.

Generation starts from the prompt's layout sketch (objects filled with their
hue color) noised to ``t_start``, so the ground-truth boxes of the bench
scene hold for the generated image. The exact shade of every object is only
available through its reference image.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numkit import derive_seed
from ..scenekit.dataset import make_scene
from ..scenekit.embed import StubEmbedder
from ..scenekit.scenes import SceneSpec, crop, render, render_sketch, tokenize
from ..diffusion.latent import bbox_cells, decode, encode
from ..diffusion.model import DenoiserConfig, make_conditions
from ..diffusion.sampling import Denoiser, ddim_sample
from ..diffusion.schedule import DiffusionSchedule


@dataclass
class BenchItem:
    index: int
    spec: SceneSpec
    refs: list                      # reference image embedding per object
    seed: int = 0

    @property
    def prompt(self) -> str:
        return self.spec.prompt


def reference_embedding(obj, embedder) -> np.ndarray:
    """Embedding of the object rendered alone, cropped to its box."""
    return embedder.embed_image(crop(render(SceneSpec([obj])), obj.bbox))


def make_bench(n: int, seed: int, *, n_objects: int = 2, distinct_hues: bool = False,
               embedder=None) -> list[BenchItem]:
    embedder = embedder or StubEmbedder()
    items = []
    for i in range(n):
        _, spec, s = make_scene(seed, i, n_objects=n_objects, distinct_hues=distinct_hues)
        items.append(BenchItem(i, spec, [reference_embedding(o, embedder) for o in spec.objects], s))
    return items


@dataclass
class GenSettings:
    steps: int = 50
    guidance: float = 7.5
    t_start: int = 600
    clip_x0: float | None = 1.0
    batch_size: int = 50
    merge_mode: str | None = None
    freeze_relevance: bool = False
    record_every: int = 5


@dataclass
class Generated:
    latents: np.ndarray                         # (n, N, C)
    relevance: list = field(default_factory=list)   # per job: (recorded steps, layers, M, N)

    def images(self, cfg: DenoiserConfig) -> np.ndarray:
        return decode(self.latents, cfg.h, cfg.w)


def local_weights(items, cfg: DenoiserConfig) -> np.ndarray:
    """Bbox cell indicators per object: the weights that add each stream only inside its box."""
    M = max(len(it.spec.objects) for it in items)
    w = np.zeros((len(items), M, cfg.n_pos))
    for b, it in enumerate(items):
        for m, o in enumerate(it.spec.objects):
            w[b, m] = bbox_cells(o.bbox, cfg.h, cfg.w)
    return w


def generate(params, cfg: DenoiserConfig, sched: DiffusionSchedule, items, seeds,
             settings: GenSettings | None = None, *, hook=None, local: bool = False,
             record: bool = False) -> Generated:
    """One sample per (item, seed) job.

    ``hook(jobs, step, layer, z_text, relevance) -> z_text`` sees the batch's
    job indices and runs on the conditional branch. ``local`` restricts every
    reference stream to its object's box cells.
    """
    settings = settings or GenSettings()
    if len(items) != len(seeds):
        raise ValueError("need one seed per item")
    out, maps = [], []
    for start in range(0, len(items), settings.batch_size):
        batch = items[start:start + settings.batch_size]
        jobs = list(range(start, start + len(batch)))
        cond = make_conditions([tokenize(it.prompt) for it in batch],
                               [[tokenize(o.phrase) for o in it.spec.objects] for it in batch],
                               [it.refs for it in batch], cfg)
        x_init = np.stack([encode(render_sketch(it.spec), cfg.h, cfg.w) for it in batch])
        text_hook = None
        if hook is not None:
            text_hook = lambda step, layer, zt, A, jobs=jobs: hook(jobs, step, layer, zt, A)
        model = Denoiser(params, cfg, settings.merge_mode, text_hook=text_hook,
                         weight_override=local_weights(batch, cfg) if local else None,
                         freeze_relevance=settings.freeze_relevance, record=record)
        x = ddim_sample(model, sched, cond, settings.steps, settings.guidance,
                        [int(seeds[j]) for j in jobs], x_init=x_init, t_start=settings.t_start,
                        clip_x0=settings.clip_x0)
        out.append(x)
        if record:
            kept = model.relevance_log[::settings.record_every]
            per_step = np.stack([np.stack(layers) for layers in kept]).astype(np.float32)  # (S, L, B, M, N)
            maps.extend(np.moveaxis(per_step, 2, 0))
    return Generated(np.concatenate(out), maps)


def sample_seed(seed: int, item: int, k: int) -> int:
    return derive_seed(seed, "bench", item, k)


def object_crops(images, items):
    """Per job: one crop per object of its generated image."""
    return [[crop(img, o.bbox) for o in it.spec.objects] for img, it in zip(images, items)]
