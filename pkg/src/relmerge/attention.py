"""Cross-attention, decoupled cross-attention and object relevance maps.

Latent features are arrays of shape ``(..., N, D)`` with ``N = h * w``
spatial rows. Condition features are ``(..., S, D_cond)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .errors import DegenerateMapError, ShapeError


@dataclass(frozen=True)
class LatentFeatures:
    h: int
    w: int
    z: np.ndarray

    def __post_init__(self):
        if self.z.ndim != 2 or self.z.shape[0] != self.h * self.w:
            raise ShapeError(f"latent grid {self.h}x{self.w} does not match features {self.z.shape}")


@dataclass
class AttnProjections:
    w_q: np.ndarray
    w_k_text: np.ndarray
    w_v_text: np.ndarray
    w_k_img: np.ndarray
    w_v_img: np.ndarray

    @property
    def d(self) -> int:
        return self.w_q.shape[1]

    def __post_init__(self):
        d = self.w_q.shape[1]
        for name in ("w_k_text", "w_v_text", "w_k_img", "w_v_img"):
            if getattr(self, name).shape[1] != d:
                raise ShapeError(f"{name} has {getattr(self, name).shape[1]} output columns, expected {d}")
        if self.w_k_text.shape != self.w_v_text.shape or self.w_k_img.shape != self.w_v_img.shape:
            raise ShapeError("key/value projections of one stream must share a shape")


def _features(z):
    return z.z if isinstance(z, LatentFeatures) else z


def attend(q, k, v, bias=None):
    """softmax(q k^T / sqrt(d) + bias) v over the key axis. Returns (out, probs)."""
    logits = q @ np.swapaxes(k, -1, -2)
    scale = math.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + bias * scale
    probs = nk.softmax_rows(logits, scale)
    return probs @ v, probs


def attend_backward(g, q, k, v, probs):
    scale = math.sqrt(q.shape[-1])
    dprobs = g @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(probs, -1, -2) @ g
    dlogits = nk.softmax_backward(dprobs, probs, scale)
    dq = dlogits @ k
    dk = np.swapaxes(dlogits, -1, -2) @ q
    return dq, dk, dv


def cross_attention(z, c, proj_k, proj_v, proj_q):
    """Attn(Z W_q, c W_k, c W_v) with softmax over condition tokens, scaled by sqrt(d)."""
    z = _features(z)
    if z.shape[-1] != proj_q.shape[0]:
        raise ShapeError(f"latent features {z.shape} do not fit W_q {proj_q.shape}")
    if c.shape[-1] != proj_k.shape[0] or c.shape[-1] != proj_v.shape[0]:
        raise ShapeError(f"condition {c.shape} does not fit W_k {proj_k.shape} / W_v {proj_v.shape}")
    if proj_k.shape[1] != proj_q.shape[1]:
        raise ShapeError(f"W_k {proj_k.shape} and W_q {proj_q.shape} disagree on head size")
    out, _ = attend(z @ proj_q, c @ proj_k, c @ proj_v)
    return out


def decoupled_cross_attention(z, c_text, c_img, proj: AttnProjections):
    z_text = cross_attention(z, c_text, proj.w_k_text, proj.w_v_text, proj.w_q)
    z_img = cross_attention(z, c_img, proj.w_k_img, proj.w_v_img, proj.w_q)
    return z_text + z_img


def relevance_from_qk(q, k_obj):
    """Spatial relevance of object keys ``(..., S, d)`` to queries ``(..., N, d)``.

    Returns ``(A, probs)`` where ``probs`` is the per-token softmax over the N
    positions and ``A`` its mean over tokens.
    """
    logits = k_obj @ np.swapaxes(q, -1, -2)
    probs = nk.softmax_rows(logits, math.sqrt(q.shape[-1]))
    return probs.mean(axis=-2), probs


def relevance_backward(g_a, q, k_obj, probs):
    scale = math.sqrt(q.shape[-1])
    s = probs.shape[-2]
    dprobs = np.broadcast_to(g_a[..., None, :] / s, probs.shape)
    dlogits = nk.softmax_backward(dprobs, probs, scale)
    dk = dlogits @ q
    dq = np.swapaxes(dlogits, -1, -2) @ k_obj
    return dq, dk


def relevance_map(z, c_text_i, proj: AttnProjections) -> np.ndarray:
    """Mean over the object's text tokens of the spatial softmax of K Q^T / sqrt(d).

    The result is a distribution over the N latent positions.
    """
    z = _features(z)
    if c_text_i.shape[-2] == 0:
        raise ValueError("object text features are empty")
    if c_text_i.shape[-1] != proj.w_k_text.shape[0]:
        raise ShapeError(f"object text {c_text_i.shape} does not fit W_k_text {proj.w_k_text.shape}")
    if z.shape[-1] != proj.w_q.shape[0]:
        raise ShapeError(f"latent features {z.shape} do not fit W_q {proj.w_q.shape}")
    a, _ = relevance_from_qk(z @ proj.w_q, c_text_i @ proj.w_k_text)
    return a


def normalize_relevance(a: np.ndarray) -> np.ndarray:
    """Divide each map (last axis) by its mean, so the result averages to 1."""
    a = np.asarray(a)
    m = a.mean(axis=-1, keepdims=True)
    if np.any(m <= 0):
        raise DegenerateMapError("relevance map has zero mean")
    out = a / m
    # constant maps normalize to exactly one, independent of rounding in the mean
    flat = a.max(axis=-1, keepdims=True) == a.min(axis=-1, keepdims=True)
    return np.where(flat, 1.0, out)


def normalize_backward(g, a):
    """Gradient of ``a / mean(a)`` w.r.t. ``a`` (last axis)."""
    n = a.shape[-1]
    m = a.mean(axis=-1, keepdims=True)
    return g / m - (g * a).sum(axis=-1, keepdims=True) / (m * m * n)
