from __future__ import annotations

import numpy as np

from ..attention import normalize_relevance
from ..errors import DataError, DegenerateMapError
from ..scenekit.embed import cosine

STRATEGIES = ("uniform", "weighted")


def inject_noise(z_text, eps_object, strategy: str, relevance=None):
    """Add ``eps_object`` to text features, either everywhere or by relevance.

    ``weighted`` scales each spatial row of the noise by the normalized map
    and rescales the result back to the Frobenius norm of ``eps_object``, so
    both strategies inject noise of equal norm. Leading batch axes are allowed
    (``z`` ``(..., N, D)``, map ``(..., N)``); norms are per leading index.
    """
    z = np.asarray(z_text)
    eps = np.asarray(eps_object, dtype=z.dtype)
    if strategy == "uniform":
        return z + eps
    if strategy != "weighted":
        raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    if relevance is None:
        raise ValueError("weighted injection needs a relevance map")
    w = normalize_relevance(np.asarray(relevance, dtype=np.float64))
    shaped = eps * w[..., None]
    n_eps = np.sqrt(np.sum(eps.astype(np.float64) ** 2, axis=(-2, -1), keepdims=True))
    n_shaped = np.sqrt(np.sum(shaped.astype(np.float64) ** 2, axis=(-2, -1), keepdims=True))
    ratio = np.divide(n_eps, n_shaped, out=np.zeros_like(n_eps), where=n_shaped > 0)
    return z + (shaped * ratio).astype(z.dtype)


def bbox_delta(img_noise, img_clean, bbox):
    """Mean absolute pixel difference inside and outside ``bbox`` = [x0, y0, x1, y1).

    Returns None (skip) when the box covers the whole frame or is empty.
    """
    a = np.asarray(img_noise, dtype=np.float64)
    b = np.asarray(img_clean, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"images differ in shape: {a.shape} vs {b.shape}")
    H, W = a.shape[:2]
    x0, y0, x1, y1 = (int(v) for v in bbox)
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, W), min(y1, H)
    if x1 <= x0 or y1 <= y0 or (x1 - x0) * (y1 - y0) == H * W:
        return None
    diff = np.abs(a - b)
    if diff.ndim == 3:
        diff = diff.mean(axis=2)
    inside = np.zeros((H, W), bool)
    inside[y0:y1, x0:x1] = True
    return float(diff[inside].mean()), float(diff[~inside].mean())


def relevance_ratio(img_noise, img_clean, bbox, min_denominator: float = 1e-8):
    """Δ_bbox / Δ_non_bbox for one image pair, or None if it must be skipped."""
    d = bbox_delta(img_noise, img_clean, bbox)
    if d is None or d[1] < min_denominator:
        return None
    return d[0] / d[1]


def _embed_image(embedder, x):
    x = np.asarray(x)
    return embedder.embed_image(x) if x.ndim == 3 else x


def _mean_cos(pairs, what):
    vals = []
    for i, (a, b) in enumerate(pairs):
        try:
            vals.append(cosine(a(), b()))
        except Exception as e:  # noqa: BLE001 - re-raised with the prompt index
            raise DataError(f"{what} {i}: embedder failed: {e}") from e
    if not vals:
        raise ValueError(f"{what}: no inputs")
    return float(np.mean(vals))


def text_match_score(images, prompts, embedder) -> float:
    """Mean cosine between each image's embedding and its text's embedding."""
    if len(images) != len(prompts):
        raise ValueError("need one prompt per image")
    return _mean_cos([(lambda im=im: _embed_image(embedder, im), lambda p=p: embedder.embed_text(p))
                      for im, p in zip(images, prompts)], "prompt")


def image_match_score(images, refs, embedder) -> float:
    """Mean cosine between each image and its reference (an image or an embedding)."""
    if len(images) != len(refs):
        raise ValueError("need one reference per image")
    return _mean_cos([(lambda im=im: _embed_image(embedder, im), lambda r=r: _embed_image(embedder, r))
                      for im, r in zip(images, refs)], "prompt")


def attention_overlap(map_a, map_b) -> float:
    """Histogram intersection of two maps after scaling each to sum 1."""
    a = np.asarray(map_a, dtype=np.float64)
    b = np.asarray(map_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"maps differ in shape: {a.shape} vs {b.shape}")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("relevance maps must be non-negative")
    sa, sb = a.sum(axis=-1, keepdims=True), b.sum(axis=-1, keepdims=True)
    if np.any(sa <= 0) or np.any(sb <= 0):
        raise DegenerateMapError("cannot compare an all-zero map")
    out = np.minimum(a / sa, b / sb).sum(axis=-1)
    return float(out) if out.ndim == 0 else out
