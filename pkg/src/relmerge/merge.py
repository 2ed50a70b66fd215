"""Strategies for merging the text stream with several image streams.

A per-position weight always multiplies every channel of that position's
feature row.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .attention import normalize_relevance
from .errors import ShapeError


@dataclass
class TextWeightLayer:
    w_f: np.ndarray  # (D, 1)
    b_f: float = 0.0

    @classmethod
    def zeros(cls, d: int, dtype=np.float64) -> "TextWeightLayer":
        return cls(np.zeros((d, 1), dtype=dtype), 0.0)


def _check_streams(z_text, z_imgs):
    for z in z_imgs:
        if z.shape != z_text.shape:
            raise ShapeError(f"image stream {z.shape} does not match text stream {z_text.shape}")


def uniform_merge(z_text: np.ndarray, z_imgs) -> np.ndarray:
    """Z_text plus every image stream at full weight. An empty list returns z_text."""
    _check_streams(z_text, z_imgs)
    out = z_text
    for z in z_imgs:
        out = out + z
    return out


def _add_weighted(out, z_imgs, maps):
    if len(z_imgs) != len(maps):
        raise ValueError(f"{len(z_imgs)} image streams but {len(maps)} relevance maps")
    _check_streams(out, z_imgs)
    for z, a in zip(z_imgs, maps):
        a = np.asarray(a)
        if a.shape != z.shape[:-1]:
            raise ShapeError(f"relevance map {a.shape} does not match stream positions {z.shape[:-1]}")
        out = out + normalize_relevance(a)[..., None] * z
    return out


def weighted_merge(z_text: np.ndarray, z_imgs, maps) -> np.ndarray:
    """Z_text + sum_i (A_i / mean A_i) * Z_img_i."""
    if len(z_imgs) == 0:
        raise ValueError("weighted merge needs at least one image stream")
    return _add_weighted(z_text, z_imgs, maps)


def text_weight(z_text: np.ndarray, f: TextWeightLayer) -> np.ndarray:
    """Mean-normalized sigmoid(Z_text w_f + b_f), one weight per position."""
    if z_text.shape[-1] != f.w_f.shape[0]:
        raise ShapeError(f"text stream {z_text.shape} does not fit w_f {f.w_f.shape}")
    raw = nk.sigmoid(z_text @ f.w_f + f.b_f)[..., 0]
    return normalize_relevance(raw)


def trained_weighted_merge(z_text: np.ndarray, z_imgs, maps, f: TextWeightLayer) -> np.ndarray:
    out = text_weight(z_text, f)[..., None] * z_text
    return _add_weighted(out, z_imgs, maps)
