"""Object-quality scoring and top-k data selection."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .scenekit.embed import cosine

SCORE_FIELDS = ("total", "object_pair", "single_object")
SCORE_ALIASES = {"total": "total", "pair": "object_pair", "object_pair": "object_pair",
                 "single": "single_object", "single_object": "single_object"}


@dataclass(frozen=True)
class QualityScore:
    single_object: float
    object_pair: float
    total: float

    def as_dict(self) -> dict:
        return {"single_object": self.single_object, "object_pair": self.object_pair, "total": self.total}


def single_object_score(objects) -> float:
    """Mean cosine between each object's text and image embedding.

    ``objects`` is a sequence of ``(text_embedding, image_embedding)`` pairs.
    """
    if len(objects) == 0:
        raise ValueError("single_object_score needs at least one object")
    return float(sum(cosine(t, i) for t, i in objects) / len(objects))


def object_pair_score(image_embeddings) -> float:
    """Negative mean cosine over ordered distinct pairs; 0 for a single object."""
    n = len(image_embeddings)
    if n == 0:
        raise ValueError("object_pair_score needs at least one object")
    if n == 1:
        return 0.0
    total = 0.0
    for a in range(n):
        for b in range(n):
            if a != b:
                total += cosine(image_embeddings[a], image_embeddings[b])
    return float(-total / (n * (n - 1)))


def quality_from_embeddings(text_embs, image_embs) -> QualityScore:
    single = single_object_score(list(zip(text_embs, image_embs)))
    pair = object_pair_score(image_embs)
    return QualityScore(single, pair, single + pair)


def object_quality_score(record: dict, embeddings: np.ndarray) -> QualityScore:
    """Score one manifest record from its cached embedding rows."""
    rid = record.get("id", record.get("image_path"))
    objs = record.get("objects") or []
    if not objs:
        raise DataError(f"record {rid}: no objects to score")
    texts, images = [], []
    for o in objs:
        for key, out in (("text_embedding", texts), ("image_embedding", images)):
            row = o.get(key)
            if row is None or not 0 <= int(row) < len(embeddings):
                raise DataError(f"record {rid}: object {o.get('text')!r} is missing its {key}")
            out.append(embeddings[int(row)])
    return quality_from_embeddings(texts, images)


def score_manifest(manifest, threads: int = 1):
    """Copy of ``manifest`` with a ``scores`` field on every record."""
    def one(rec):
        out = dict(rec)
        out["scores"] = object_quality_score(rec, manifest.embeddings).as_dict()
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, manifest.records))
    else:
        records = [one(r) for r in manifest.records]
    return manifest.with_records(records)


def select_top_k(manifest, k: int, score_field: str = "total"):
    """The ``k`` highest-scoring records, descending; ties keep manifest order."""
    field = SCORE_ALIASES.get(score_field)
    if field is None:
        raise ValueError(f"score_field must be one of {SCORE_FIELDS}, got {score_field!r}")
    n = len(manifest.records)
    if not 0 <= k <= n:
        raise ValueError(f"k={k} outside [0, {n}]")
    keys = []
    for i, rec in enumerate(manifest.records):
        scores = rec.get("scores")
        if scores is None or field not in scores:
            raise DataError(f"record {rec.get('id', i)} has no {field} score; run scoring first")
        keys.append(scores[field])
    order = sorted(range(n), key=lambda i: (-keys[i], i))
    return manifest.subset(order[:k])
