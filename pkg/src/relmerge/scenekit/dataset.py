"""Corpus building and the manifest format.

A dataset directory holds::

    manifest.jsonl    one JSON record per image (UTF-8, keys sorted)
    embeddings.bin    float64 little-endian rows, ``embedding_dim`` wide
    dataset.json      {"embedding_dim", "embedding_file", "count", ...}
    images/NNNNNN.png

Record fields: ``id``, ``image_path`` (relative to the manifest), ``prompt``,
``seed``, ``planted`` (``"duplicate"``, ``"distinct"`` or null), optional
``scores`` and ``objects``; each object has ``text`` (exact label),
``phrase`` (prompt phrase), ``shape``, ``color``, ``bbox`` [x0, y0, x1, y1)
``anchor`` [x, y, size], and ``text_embedding`` / ``image_embedding`` row
indices into ``embeddings.bin``.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DataError
from ..numkit import Rng, derive_seed
from .embed import StubEmbedder
from .scenes import SceneObject, SceneSpec, crop, gen_scene, render

MANIFEST = "manifest.jsonl"
EMBEDDINGS = "embeddings.bin"
META = "dataset.json"
DEFAULT_MIXTURE = {1: 0.25, 2: 0.4, 3: 0.2, 4: 0.15}


@dataclass
class Manifest:
    root: Path
    records: list[dict]
    embeddings: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def image(self, i: int) -> np.ndarray:
        path = self.root / self.records[i]["image_path"]
        try:
            with Image.open(path) as im:
                return np.asarray(im.convert("RGB"))
        except OSError as e:
            raise DataError(f"cannot read image {path}: {e}") from e

    def spec(self, i: int) -> SceneSpec:
        return record_spec(self.records[i])

    def embedding(self, row: int) -> np.ndarray:
        return self.embeddings[row]

    def subset(self, indices) -> "Manifest":
        return Manifest(self.root, [self.records[i] for i in indices], self.embeddings, dict(self.meta))

    def with_records(self, records, embeddings=None) -> "Manifest":
        return Manifest(self.root, records, self.embeddings if embeddings is None else embeddings,
                        dict(self.meta))

    def save(self, out_dir) -> Path:
        """Write manifest + embeddings to ``out_dir``; image paths are re-rooted there."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = []
        for rec in self.records:
            rec = dict(rec)
            rec["image_path"] = Path(os.path.relpath(self.root / rec["image_path"], out)).as_posix()
            lines.append(json.dumps(rec, sort_keys=True))
        (out / MANIFEST).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        emb = np.ascontiguousarray(self.embeddings, dtype="<f8")
        (out / EMBEDDINGS).write_bytes(emb.tobytes())
        meta = dict(self.meta)
        meta.update(embedding_dim=int(emb.shape[1]) if emb.ndim == 2 else 0,
                    embedding_file=EMBEDDINGS, count=len(self.records))
        (out / META).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return out / MANIFEST

    @classmethod
    def load(cls, path) -> "Manifest":
        p = Path(path)
        root = p if p.is_dir() else p.parent
        mpath = root / MANIFEST if p.is_dir() else p
        try:
            meta = json.loads((root / META).read_text(encoding="utf-8"))
            text = mpath.read_text(encoding="utf-8")
            raw = (root / meta.get("embedding_file", EMBEDDINGS)).read_bytes()
        except (OSError, ValueError) as e:
            raise DataError(f"cannot read dataset at {root}: {e}") from e
        records = []
        for n, line in enumerate(text.splitlines(), 1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except ValueError as e:
                    raise DataError(f"{mpath}:{n}: bad record: {e}") from e
        dim = int(meta["embedding_dim"])
        emb = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        emb = emb.reshape(-1, dim) if dim else emb.reshape(0, 0)
        return cls(root, records, emb, meta)


def record_spec(rec: dict) -> SceneSpec:
    objs = [SceneObject(o["shape"], o["color"], tuple(o["bbox"]), z=k, anchor=tuple(o["anchor"]))
            for k, o in enumerate(rec["objects"])]
    return SceneSpec(objs)


def _object_count(rng: Rng, mixture: dict, max_objects: int, min_objects: int = 1) -> int:
    counts = [k for k in sorted(mixture) if min_objects <= k <= max_objects]
    if not counts:
        raise ValueError(f"mixture {mixture} has no counts in [{min_objects}, {max_objects}]")
    return counts[rng.choice(len(counts), [mixture[k] for k in counts])]


def make_scene(seed: int, index: int, *, max_objects: int = 4, mixture=None, duplicate: bool = False,
               distinct_hues: bool = False, n_objects: int | None = None):
    """Scene ``index`` of the corpus with master ``seed``. Returns ``(image, spec, scene_seed)``."""
    scene_seed = derive_seed(seed, "scene", index)
    rng = Rng(scene_seed)
    if n_objects is None:
        n_objects = _object_count(rng, mixture or DEFAULT_MIXTURE, max_objects,
                                  min_objects=2 if duplicate else 1)
    image, spec = gen_scene(rng, n_objects, duplicate=duplicate, distinct_hues=distinct_hues)
    return image, spec, scene_seed


def build_dataset(n_images: int, seed: int, out_dir, *, max_objects: int = 4, mixture=None,
                  duplicate_fraction: float = 0.0, distinct_hues: bool = False, n_objects: int | None = None,
                  embedder=None, threads: int = 1) -> Manifest:
    """Generate, render and embed ``n_images`` scenes into ``out_dir``.

    ``duplicate_fraction`` plants scenes whose objects repeat the first one;
    exactly ``round(fraction * n)`` of them, chosen by a seeded permutation.
    """
    if n_images < 1:
        raise ValueError("n_images must be positive")
    embedder = embedder or StubEmbedder()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out / 'images'}: {e}") from e
    n_dup = int(round(duplicate_fraction * n_images))
    perm = np.argsort(Rng(derive_seed(seed, "planted")).uniform(n_images), kind="stable")
    dup = np.zeros(n_images, bool)
    dup[perm[:n_dup]] = True

    def one(i):
        image, spec, scene_seed = make_scene(seed, i, max_objects=max_objects, mixture=mixture,
                                             duplicate=bool(dup[i]), distinct_hues=distinct_hues,
                                             n_objects=n_objects)
        rel = f"images/{i:06d}.png"
        try:
            Image.fromarray(image).save(out / rel, format="PNG")
        except OSError as e:
            raise DataError(f"cannot write {out / rel}: {e}") from e
        vecs = []
        for o in spec.objects:
            vecs.append(embedder.embed_text(o.label))
            vecs.append(embedder.embed_image(crop(image, o.bbox)))
        return i, spec, scene_seed, rel, vecs

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n_images)))
    else:
        results = [one(i) for i in range(n_images)]

    records, rows = [], []
    for i, spec, scene_seed, rel, vecs in results:
        objs = []
        for k, o in enumerate(spec.objects):
            objs.append({
                "text": o.label, "phrase": o.phrase, "shape": o.shape, "color": o.color,
                "bbox": list(o.bbox), "anchor": list(o.anchor),
                "text_embedding": len(rows) + 2 * k, "image_embedding": len(rows) + 2 * k + 1,
            })
        rows.extend(vecs)
        planted = None if n_dup == 0 else ("duplicate" if dup[i] else "distinct")
        records.append({"id": i, "image_path": rel, "prompt": spec.prompt, "seed": scene_seed,
                        "planted": planted, "objects": objs})
    meta = {"seed": seed, "n_images": n_images, "max_objects": max_objects,
            "duplicate_fraction": duplicate_fraction, "embedder": type(embedder).__name__}
    manifest = Manifest(out, records, np.asarray(rows, dtype=np.float64), meta)
    manifest.save(out)
    return manifest


def rerender(rec: dict) -> np.ndarray:
    """Rebuild a record's image from its objects, without touching disk."""
    return render(record_spec(rec))
