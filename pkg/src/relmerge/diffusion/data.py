from __future__ import annotations

import numpy as np

from ..scenekit.dataset import Manifest
from ..scenekit.scenes import tokenize
from .latent import encode
from .model import DenoiserConfig
from .train import TrainData


def load_training_data(manifest: Manifest, cfg: DenoiserConfig) -> TrainData:
    """Latents, prompt tokens, object tokens and cached reference embeddings per record.

    References are the image embeddings of each object's own crop.
    """
    latents, prompts, objects, refs, ids = [], [], [], [], []
    for i, rec in enumerate(manifest.records):
        if len(rec["objects"]) > cfg.max_refs:
            continue
        latents.append(encode(manifest.image(i), cfg.h, cfg.w))
        prompts.append(tokenize(rec["prompt"]))
        objects.append([tokenize(o["phrase"]) for o in rec["objects"]])
        refs.append([manifest.embedding(o["image_embedding"]) for o in rec["objects"]])
        ids.append(rec["id"])
    return TrainData(np.stack(latents), prompts, objects, refs, ids)
