"""Procedural shape corpus: tiny grayscale images of shape-times-fill classes.

Two render styles are provided so the diffusion generator can be
pretrained on one visual domain (brighter, larger, more position jitter)
while the simulated clients hold another (dimmer, tighter). The class
concepts are shared between the styles; the rendering parameters are not,
which is the domain gap the contrastive loss in the classifier is there
to bridge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, quantize01
from .rng import stream

SHAPES = ("square", "circle", "triangle", "cross", "diamond")
FILLS = ("solid", "hollow")

DEFAULT_CLASSES: tuple[tuple[str, str], ...] = (
    ("square", "solid"),
    ("square", "hollow"),
    ("circle", "solid"),
    ("circle", "hollow"),
    ("triangle", "solid"),
    ("triangle", "hollow"),
    ("cross", "solid"),
    ("cross", "hollow"),
)

MIN_IMAGE_SIDE = 8


@dataclass(frozen=True)
class RenderStyle:
    """Jitter and intensity pool for one corpus variant."""

    name: str
    pos_jitter: float = 1.5
    size_range: tuple[float, float] = (4.0, 6.0)
    fg_range: tuple[float, float] = (0.85, 1.0)
    bg_range: tuple[float, float] = (0.0, 0.05)
    noise_std: float = 0.02
    outline: float = 1.6


PRETRAIN_STYLE = RenderStyle(name="pretrain")
CLIENT_STYLE = RenderStyle(
    name="client",
    pos_jitter=1.0,
    size_range=(3.5, 5.0),
    fg_range=(0.65, 0.85),
    bg_range=(0.0, 0.08),
    noise_std=0.03,
    outline=1.4,
)

STYLES = {"pretrain": PRETRAIN_STYLE, "client": CLIENT_STYLE}


@dataclass(frozen=True)
class ShapeworldSpec:
    image_hw: tuple[int, int] = (16, 16)
    classes: tuple[tuple[str, str], ...] = DEFAULT_CLASSES
    samples_per_class: int = 250
    style: RenderStyle = field(default_factory=lambda: CLIENT_STYLE)
    seed: int = 0

    def __post_init__(self) -> None:
        h, w = self.image_hw
        if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
            raise ValueError(f"image too small to render shapes: {h}x{w} (minimum {MIN_IMAGE_SIDE})")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate class definitions")
        for shape, fill in self.classes:
            if shape not in SHAPES or fill not in FILLS:
                raise ValueError(f"unknown class parameters ({shape}, {fill})")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")


def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, s: float) -> np.ndarray:
    if shape == "square":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape == "circle":
        return dx * dx + dy * dy <= s * s
    if shape == "triangle":
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= (dy + s) * 0.5)
    if shape == "cross":
        arm = max(1.0, s * 0.4)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= s)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= s))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= s
    raise ValueError(f"unknown shape {shape!r}")


def render_shape(
    shape: str, fill: str, hw: tuple[int, int], cx: float, cy: float, s: float, outline: float
) -> np.ndarray:
    """Boolean foreground mask for one instance."""
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    mask = _shape_mask(shape, dx, dy, s)
    if fill == "hollow":
        inner = max(s - outline, 0.5)
        mask &= ~_shape_mask(shape, dx, dy, inner)
    return mask


def generate_shapeworld(spec: ShapeworldSpec) -> Corpus:
    """Deterministic corpus for `spec`; labels follow the class list order."""
    h, w = spec.image_hw
    n_classes = len(spec.classes)
    total = n_classes * spec.samples_per_class
    images = np.zeros((total, 1, h, w), dtype=np.float32)
    labels = np.zeros((total,), dtype=np.int64)
    out = 0
    for label, (shape, fill) in enumerate(spec.classes):
        for k in range(spec.samples_per_class):
            rng = stream(spec.seed, "shapeworld", spec.style.name, label, k)
            cx = (w - 1) / 2.0 + rng.uniform(-spec.style.pos_jitter, spec.style.pos_jitter)
            cy = (h - 1) / 2.0 + rng.uniform(-spec.style.pos_jitter, spec.style.pos_jitter)
            s = rng.uniform(*spec.style.size_range)
            fg = rng.uniform(*spec.style.fg_range)
            bg = rng.uniform(*spec.style.bg_range)
            mask = render_shape(shape, fill, (h, w), cx, cy, s, spec.style.outline)
            img = np.where(mask, fg, bg).astype(np.float32)
            if spec.style.noise_std > 0:
                img = img + rng.normal(0.0, spec.style.noise_std, size=img.shape).astype(np.float32)
            images[out, 0] = quantize01(img)
            labels[out] = label
            out += 1
    return Corpus(images, labels)
