"""Desk-scale training pipeline shared by the acceptance criteria.

Artifacts go to ``$RELMERGE_DESK_DIR`` when set (and are reused when their
recipe matches), otherwise to a fresh temporary directory.
"""
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from relmerge.diffusion.checkpoint import read_checkpoint, save_checkpoint
from relmerge.diffusion.data import load_training_data
from relmerge.diffusion.model import DenoiserConfig, init_params, trainable_names
from relmerge.diffusion.schedule import make_schedule
from relmerge.diffusion.train import TrainSettings, train
from relmerge.scenekit.dataset import Manifest, build_dataset


@dataclass(frozen=True)
class Recipe:
    n_images: int = 2000
    data_seed: int = 0
    pretrain_steps: int = 5000
    pretrain_mode: str = "weighted"
    finetune_steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    init_seed: int = 0
    train_seed: int = 0
    finetune_seed: int = 11


FINETUNE_MODES = ("uniform", "weighted", "trained")


class Desk:
    def __init__(self, root: Path, recipe: Recipe = Recipe()):
        self.root = Path(root)
        self.recipe = recipe
        self.sched = make_schedule(1000)
        self.timings = {}

    def _fresh(self, path: Path, key: dict):
        if not path.exists():
            return False
        _, meta = read_checkpoint(path)
        return meta.get("recipe") == key

    def data(self) -> Manifest:
        d = self.root / "data"
        if not (d / "manifest.jsonl").exists():
            t0 = time.time()
            build_dataset(self.recipe.n_images, self.recipe.data_seed, d)
            self.timings["data"] = time.time() - t0
        return Manifest.load(d)

    def base(self):
        """Pretrained backbone: (params, cfg, per-step losses)."""
        r = self.recipe
        path = self.root / "base.mipw"
        key = asdict(r)
        if not self._fresh(path, key):
            cfg = DenoiserConfig(merge_mode=r.pretrain_mode)
            data = load_training_data(self.data(), cfg)
            t0 = time.time()
            params, losses = train(init_params(cfg, r.init_seed), cfg, self.sched, data,
                                   TrainSettings(steps=r.pretrain_steps, batch_size=r.batch_size, lr=r.lr,
                                                 seed=r.train_seed),
                                   trainable_names(cfg, "pretrain"))
            self.timings["pretrain"] = time.time() - t0
            save_checkpoint(params, path, {"model": cfg.to_dict(), "recipe": key})
            np.save(self.root / "base_losses.npy", np.array(losses))
        params, meta = read_checkpoint(path)
        return params, DenoiserConfig.from_dict(meta["model"]), np.load(self.root / "base_losses.npy")

    def finetuned(self, mode: str):
        r = self.recipe
        path = self.root / f"ft_{mode}.mipw"
        key = {**asdict(r), "mode": mode}
        if not self._fresh(path, key):
            base, cfg0, _ = self.base()
            cfg = DenoiserConfig.from_dict({**cfg0.to_dict(), "merge_mode": mode})
            data = load_training_data(self.data(), cfg)
            t0 = time.time()
            params, _ = train(dict(base), cfg, self.sched, data,
                              TrainSettings(steps=r.finetune_steps, batch_size=r.batch_size, lr=r.lr,
                                            seed=r.finetune_seed, mode="finetune"),
                              trainable_names(cfg, "finetune"))
            self.timings[f"finetune_{mode}"] = time.time() - t0
            save_checkpoint(params, path, {"model": cfg.to_dict(), "recipe": key})
        params, meta = read_checkpoint(path)
        return params, DenoiserConfig.from_dict(meta["model"])

    def untrained(self):
        _, cfg, _ = self.base()
        return init_params(cfg, self.recipe.init_seed), cfg

    def write_timings(self):
        (self.root / "timings.json").write_text(json.dumps(self.timings, indent=1))
