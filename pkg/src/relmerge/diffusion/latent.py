"""Fixed image <-> latent mapping standing in for a VAE.

The latent is the block-mean color of each cell of an ``h x w`` grid, scaled
to [-1, 1]; decoding repeats each cell over its block.
"""
from __future__ import annotations

import numpy as np


def encode(image: np.ndarray, h: int = 8, w: int = 8) -> np.ndarray:
    """uint8 ``(H, W, 3)`` image -> ``(h*w, 3)`` latent rows (row-major cells)."""
    img = np.asarray(image, dtype=np.float64)
    H, W, C = img.shape
    if H % h or W % w:
        raise ValueError(f"image {H}x{W} does not tile into a {h}x{w} grid")
    cells = img.reshape(h, H // h, w, W // w, C).mean(axis=(1, 3))
    return (cells / 127.5 - 1.0).reshape(h * w, C)


def decode(latent: np.ndarray, h: int = 8, w: int = 8, size: int = 64) -> np.ndarray:
    """``(..., h*w, C)`` latent -> float pixels in [0, 255] of shape ``(..., size, size, C)``."""
    z = np.asarray(latent, dtype=np.float64)
    lead = z.shape[:-2]
    grid = z.reshape(lead + (h, w, z.shape[-1]))
    px = np.clip((grid + 1.0) * 127.5, 0.0, 255.0)
    px = np.repeat(np.repeat(px, size // h, axis=-3), size // w, axis=-2)
    return px


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)


def bbox_cells(bbox, h: int = 8, w: int = 8, size: int = 64) -> np.ndarray:
    """Indicator over latent cells that intersect a pixel bbox."""
    x0, y0, x1, y1 = bbox
    ch, cw = size // h, size // w
    m = np.zeros((h, w))
    m[y0 // ch:(y1 - 1) // ch + 1, x0 // cw:(x1 - 1) // cw + 1] = 1.0
    return m.reshape(-1)
