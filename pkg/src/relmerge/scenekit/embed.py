"""Cross-modal embedders.

:class:`StubEmbedder` is deterministic and hermetic: an embedding is the unit
vector of ``[shape part (4) | color part (8) | residual (4)]``. For labels the
parts are one-hot (a hue word spreads its color weight over its two shades);
for pixels they are soft assignments computed from the crop.
:class:`ServiceEmbedder` talks to an external HTTP embedding service.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import time
import urllib.error
import urllib.request

import numpy as np
from PIL import Image

from ..errors import VocabularyError
from .scenes import BACKGROUND, COLOR_NAMES, COLORS, HUES, SHADES_OF, SHAPES

EMBED_DIM = len(SHAPES) + len(COLOR_NAMES) + 4
RESIDUAL_AMP = 0.1
COLOR_TEMP = 0.01  # squared unit-RGB distance
FILL_TEMP = 0.001
CANONICAL_FILL = {"circle": 0.778, "square": 1.0, "triangle": 0.515, "star": 0.387}
_PALETTE = np.array([COLORS[c] for c in COLOR_NAMES], dtype=np.float64) / 255.0
_BG = np.array(BACKGROUND, dtype=np.float64) / 255.0


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _softmax(x):
    x = x - x.max()
    e = np.exp(x)
    return e / e.sum()


class StubEmbedder:
    dim = EMBED_DIM

    def embed_text(self, label: str) -> np.ndarray:
        words = label.lower().split()
        if len(words) != 2 or words[1] not in SHAPES:
            raise VocabularyError(f"label {label!r} is not '<color> <shape>'")
        color, shape = words
        v = np.zeros(EMBED_DIM)
        v[SHAPES.index(shape)] = 1.0
        off = len(SHAPES)
        if color in COLOR_NAMES:
            v[off + COLOR_NAMES.index(color)] = 1.0
        elif color in HUES:
            for shade in SHADES_OF[color]:
                v[off + COLOR_NAMES.index(shade)] = 1.0 / np.sqrt(2.0)
        else:
            raise VocabularyError(f"unknown color {color!r}")
        digest = hashlib.blake2b(label.lower().encode(), digest_size=8).digest()
        res = np.frombuffer(digest, dtype=np.uint16).astype(np.float64) / 65535.0 * 2 - 1
        v[-4:] = RESIDUAL_AMP * res
        return _unit(v)

    def embed_image(self, crop: np.ndarray) -> np.ndarray:
        px = np.asarray(crop, dtype=np.float64)
        if px.ndim != 3 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError(f"crop must be a non-empty HxWx3 array, got {px.shape}")
        px = px[..., :3] / 255.0
        fg = np.clip(np.abs(px - _BG).max(axis=-1) / 0.15, 0.0, 1.0)
        d2 = ((px[..., None, :] - _PALETTE) ** 2).sum(axis=-1)
        probs = np.exp(-(d2 - d2.min(axis=-1, keepdims=True)) / COLOR_TEMP)
        probs /= probs.sum(axis=-1, keepdims=True)
        v = np.zeros(EMBED_DIM)
        total = fg.sum()
        fill = 0.0
        if total > 0:
            color_part = (probs * fg[..., None]).sum(axis=(0, 1)) / total
            v[len(SHAPES):len(SHAPES) + len(COLOR_NAMES)] = color_part
            dom = (probs.argmax(axis=-1) == color_part.argmax()) & (fg > 0.5)
            if dom.any():
                ys, xs = np.nonzero(dom)
                area = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
                fill = dom.sum() / area
                canon = np.array([CANONICAL_FILL[s] for s in SHAPES])
                v[:len(SHAPES)] = _softmax(-((fill - canon) ** 2) / FILL_TEMP)
        h, w = px.shape[:2]
        lum = px.mean(axis=-1)
        stats = np.array([
            (w - h) / (w + h),
            fill - 0.5,
            np.log((h * w) / 400.0) / 4.0,
            lum.std() * 4.0,
        ])
        v[-4:] = RESIDUAL_AMP * np.tanh(stats)
        if not v.any():
            v[-1] = 1.0
        return _unit(v)


def _png_b64(img: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class ServiceEmbedder:
    """Client for an embedding service.

    Each call POSTs ``{"kind": "text"|"image", "payload": ...}`` as JSON to
    ``url``; the payload is the label, or a base64 PNG for images. The
    response must be ``{"vector": [float, ...]}``.
    """

    def __init__(self, url: str, timeout: float = 10.0, retries: int = 2, backoff: float = 0.2):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.dim = None

    def _post(self, kind: str, payload: str) -> np.ndarray:
        body = json.dumps({"kind": kind, "payload": payload}).encode()
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        last = None
        for attempt in range(self.retries + 1):
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    vec = np.asarray(json.loads(resp.read())["vector"], dtype=np.float32)
                break
            except (urllib.error.URLError, OSError, KeyError, ValueError) as e:
                last = e
                if attempt < self.retries:
                    time.sleep(self.backoff * (attempt + 1))
        else:
            raise ConnectionError(f"embedding service at {self.url} failed: {last}") from last
        vec = vec.astype(np.float64)
        n = np.linalg.norm(vec)
        if n == 0:
            raise ValueError("embedding service returned a zero vector")
        self.dim = vec.size
        return vec / n

    def embed_text(self, label: str) -> np.ndarray:
        return self._post("text", label)

    def embed_image(self, crop: np.ndarray) -> np.ndarray:
        return self._post("image", _png_b64(crop))
