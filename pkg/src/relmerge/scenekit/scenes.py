"""Synthetic multi-object scenes with exact ground-truth boxes.

Each object has one of 8 named colors (shades). The shades come in pairs that
share a hue word ("scarlet" and "maroon" are both "red"). Prompts name objects
by hue and shape only, so the reference image is what pins down the shade.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from ..errors import GenerationError, VocabularyError
from ..numkit import Rng

CANVAS = 64
BACKGROUND = (128, 128, 128)
SHAPES = ("circle", "square", "triangle", "star")
COLORS = {
    "scarlet": (230, 40, 40),
    "maroon": (125, 15, 15),
    "lime": (90, 225, 70),
    "forest": (25, 110, 35),
    "azure": (70, 160, 250),
    "navy": (20, 30, 140),
    "lemon": (250, 230, 60),
    "olive": (135, 125, 10),
}
COLOR_NAMES = tuple(COLORS)
HUE_OF = {
    "scarlet": "red", "maroon": "red",
    "lime": "green", "forest": "green",
    "azure": "blue", "navy": "blue",
    "lemon": "yellow", "olive": "yellow",
}
HUES = ("red", "green", "blue", "yellow")
SHADES_OF = {h: tuple(c for c in COLOR_NAMES if HUE_OF[c] == h) for h in HUES}

# denoiser text vocabulary; shade names never reach the denoiser
PAD, NULL = 0, 1
VOCAB = ("<pad>", "<null>", "a", "and") + HUES + SHAPES
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

MAX_OVERLAP = 0.2
SIZE_RANGE = (16, 28)


def hue_rgb(hue: str) -> tuple[int, int, int]:
    """Mean RGB of the shades sharing ``hue``."""
    rgb = np.mean([COLORS[c] for c in SHADES_OF[hue]], axis=0)
    return tuple(int(round(v)) for v in rgb)


def tokenize(text: str) -> list[int]:
    ids = []
    for word in text.lower().split():
        if word not in TOKEN_ID:
            raise VocabularyError(f"unknown word {word!r}")
        ids.append(TOKEN_ID[word])
    return ids


def parse_prompt(prompt: str) -> list[str]:
    """Object phrases ('<hue> <shape>') in the order they appear in a prompt."""
    words = prompt.lower().split()
    tokenize(prompt)
    phrases = []
    for i, w in enumerate(words):
        if w in SHAPES:
            if i == 0 or words[i - 1] not in HUES:
                raise VocabularyError(f"shape {w!r} is not preceded by a hue word")
            phrases.append(f"{words[i - 1]} {w}")
    return phrases


@dataclass
class SceneObject:
    shape: str
    color: str
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 with exclusive x1, y1
    z: int = 0
    anchor: tuple[int, int, int] = (0, 0, 0)  # x, y, size used for drawing

    @property
    def hue(self) -> str:
        return HUE_OF[self.color]

    @property
    def label(self) -> str:
        """Exact label, e.g. 'maroon circle'."""
        return f"{self.color} {self.shape}"

    @property
    def phrase(self) -> str:
        """Prompt-level phrase, e.g. 'red circle'."""
        return f"{self.hue} {self.shape}"

    @property
    def area(self) -> int:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)


@dataclass
class SceneSpec:
    objects: list[SceneObject] = field(default_factory=list)
    canvas: int = CANVAS

    @property
    def prompt(self) -> str:
        return " and ".join(f"a {o.phrase}" for o in self.objects)

    def validate(self):
        if not 1 <= len(self.objects) <= 4:
            raise GenerationError(f"scene has {len(self.objects)} objects")
        for o in self.objects:
            x0, y0, x1, y1 = o.bbox
            if not (0 <= x0 < x1 <= self.canvas and 0 <= y0 < y1 <= self.canvas):
                raise GenerationError(f"bbox {o.bbox} leaves the canvas")
            if (x1 - x0) * (y1 - y0) >= self.canvas * self.canvas:
                raise GenerationError("bbox covers the whole canvas")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1:]:
                if box_overlap(a.bbox, b.bbox) > MAX_OVERLAP * min(a.area, b.area):
                    raise GenerationError(f"boxes {a.bbox} and {b.bbox} overlap too much")


def box_overlap(a, b) -> int:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(w, 0) * max(h, 0)


def _star_points(cx, cy, r_out, r_in):
    pts = []
    for k in range(10):
        r = r_out if k % 2 == 0 else r_in
        ang = -np.pi / 2 + k * np.pi / 5
        pts.append((cx + r * np.cos(ang), cy + r * np.sin(ang)))
    return pts


def shape_mask(shape: str, x: int, y: int, size: int, canvas: int = CANVAS) -> np.ndarray:
    """Boolean mask of one shape drawn in the ``size`` square at (x, y)."""
    img = Image.new("L", (canvas, canvas), 0)
    d = ImageDraw.Draw(img)
    x1, y1 = x + size - 1, y + size - 1
    if shape == "circle":
        d.ellipse([x, y, x1, y1], fill=255)
    elif shape == "square":
        d.rectangle([x, y, x1, y1], fill=255)
    elif shape == "triangle":
        d.polygon([(x + (size - 1) / 2, y), (x1, y1), (x, y1)], fill=255)
    elif shape == "star":
        c = (size - 1) / 2
        d.polygon(_star_points(x + c, y + c + size * 0.05, size / 2, size * 0.21), fill=255)
    else:
        raise VocabularyError(f"unknown shape {shape!r}")
    return np.asarray(img) > 0


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def render(spec: SceneSpec, colors: dict | None = None) -> np.ndarray:
    """Draw the scene in z-order. ``colors`` maps object index to an RGB override."""
    img = np.empty((spec.canvas, spec.canvas, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for i in sorted(range(len(spec.objects)), key=lambda k: spec.objects[k].z):
        o = spec.objects[i]
        m = shape_mask(o.shape, *o.anchor, canvas=spec.canvas)
        img[m] = (colors or {}).get(i, COLORS[o.color])
    return img


def render_sketch(spec: SceneSpec) -> np.ndarray:
    """Layout sketch: every object filled with its hue's mean color."""
    return render(spec, {i: hue_rgb(o.hue) for i, o in enumerate(spec.objects)})


def gen_scene(rng: Rng, n_objects: int, *, duplicate: bool = False, distinct_hues: bool = False,
              size_range=SIZE_RANGE, max_layouts: int = 20, max_tries: int = 60):
    """Random scene of ``n_objects`` shapes. Returns ``(image, spec)``.

    ``duplicate`` repeats the first object's shape and color (sizes may
    differ by a couple of pixels). ``distinct_hues`` gives every object its
    own hue word. Placement restarts the whole layout when an object does not
    fit, up to ``max_layouts`` times.
    """
    if not 1 <= n_objects <= 4:
        raise ValueError("n_objects must be between 1 and 4")
    for _ in range(max_layouts):
        spec = _try_layout(rng, n_objects, duplicate, distinct_hues, size_range, max_tries)
        if spec is not None:
            spec.validate()
            return render(spec), spec
    raise GenerationError(f"could not place {n_objects} objects in {max_layouts} layouts")


def _try_layout(rng, n_objects, duplicate, distinct_hues, size_range, max_tries):
    spec = SceneSpec()
    hues_used: set[str] = set()
    lo, hi = size_range
    for idx in range(n_objects):
        if duplicate and idx > 0:
            first = spec.objects[0]
            shape, color = first.shape, first.color
            size = int(np.clip(first.anchor[2] + rng.integers(-2, 3), lo, hi))
        else:
            shape = SHAPES[rng.integers(0, len(SHAPES))]
            pool = [c for c in COLOR_NAMES if not (distinct_hues and HUE_OF[c] in hues_used)]
            color = pool[rng.integers(0, len(pool))]
            size = rng.integers(lo, hi + 1)
        for _ in range(max_tries):
            x = rng.integers(1, CANVAS - size)
            y = rng.integers(1, CANVAS - size)
            bbox = mask_bbox(shape_mask(shape, x, y, size))
            area = (bbox[2] - bbox[0]) * (bbox[3] - bbox[1])
            if all(box_overlap(bbox, o.bbox) <= MAX_OVERLAP * min(area, o.area) for o in spec.objects):
                break
        else:
            return None
        spec.objects.append(SceneObject(shape, color, bbox, z=idx, anchor=(x, y, size)))
        hues_used.add(HUE_OF[color])
    return spec


def crop(image: np.ndarray, bbox) -> np.ndarray:
    x0, y0, x1, y1 = bbox
    return image[y0:y1, x0:x1]
