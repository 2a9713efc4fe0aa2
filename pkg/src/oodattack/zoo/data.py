"""Synthetic shape/color world used for desk-scale campaigns.

Each ID class is one (shape, color) pair drawn on a noisy mid-gray background.
OOD samples are either smooth noise textures or shapes painted with colors
that never occur in the ID palette, so no OOD sample shares an ID parameter
set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError

SPLITS = ("train", "val", "test", "ood")

ID_COLORS = {
    "red": (0.92, 0.10, 0.10),
    "green": (0.10, 0.85, 0.15),
    "blue": (0.12, 0.18, 0.92),
    "yellow": (0.92, 0.90, 0.10),
    "magenta": (0.90, 0.10, 0.88),
    "cyan": (0.10, 0.90, 0.90),
    "orange": (0.95, 0.55, 0.05),
    "purple": (0.45, 0.08, 0.75),
    "white": (0.97, 0.97, 0.97),
    "black": (0.04, 0.04, 0.04),
}

OOD_COLORS = {
    "brown": (0.55, 0.35, 0.18),
    "pink": (0.95, 0.65, 0.72),
    "olive": (0.52, 0.52, 0.12),
    "teal": (0.12, 0.50, 0.52),
    "navy": (0.10, 0.12, 0.42),
    "silver": (0.72, 0.72, 0.72),
}

SHAPES = ("square", "disc", "triangle", "cross", "ring", "diamond", "hbar", "vbar", "star")

DEFAULT_CLASSES = (
    ("square", "red"),
    ("disc", "green"),
    ("triangle", "blue"),
    ("cross", "yellow"),
    ("ring", "magenta"),
    ("diamond", "cyan"),
    ("hbar", "black"),
    ("vbar", "white"),
)

OOD_KINDS = ("noise_texture", "held_out_pair")


@dataclass(frozen=True)
class ToyWorldSpec:
    classes: tuple = DEFAULT_CLASSES
    image_size: int = 32
    ood_kinds: tuple = OOD_KINDS
    samples_per_class: int = 25
    background_noise: float = 0.08
    position_jitter: float = 0.08
    scale_jitter: float = 0.08
    color_jitter: float = 0.04
    contrast: float = 0.35  # shape color blended toward mid-gray

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(tuple(c) for c in self.classes))
        object.__setattr__(self, "ood_kinds", tuple(self.ood_kinds))
        self.validate()

    @property
    def num_id_classes(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> list[str]:
        return [f"{color}_{shape}" for shape, color in self.classes]

    def validate(self):
        if len(self.classes) < 2:
            raise ConfigError("need at least two ID classes", module="model-zoo", key="classes")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("ID class parameter sets must be pairwise distinct", module="model-zoo", key="classes")
        for shape, color in self.classes:
            if shape not in SHAPES:
                raise ConfigError(f"unknown shape {shape!r}", module="model-zoo", key="classes")
            if color not in ID_COLORS:
                raise ConfigError(f"unknown ID color {color!r}", module="model-zoo", key="classes")
        for kind in self.ood_kinds:
            if kind not in OOD_KINDS:
                raise ConfigError(f"unknown OOD kind {kind!r}", module="model-zoo", key="ood_kinds")
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8", module="model-zoo", key="image_size")
        if not 0.0 < self.contrast <= 1.0:
            raise ConfigError("contrast must lie in (0, 1]", module="model-zoo", key="contrast")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be positive", module="model-zoo", key="samples_per_class")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [list(c) for c in self.classes]
        d["ood_kinds"] = list(self.ood_kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyWorldSpec":
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) float64 in [0, 1]
    label: str  # class name for ID, OOD kind for OOD
    class_index: int = -1  # -1 for OOD
    params: dict = field(default_factory=dict)


def _sdf(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    # signed distance-like field, negative inside
    ax, ay = np.abs(dx), np.abs(dy)
    if shape == "square":
        return np.maximum(ax, ay) - r
    if shape == "disc":
        return np.hypot(dx, dy) - r
    if shape == "diamond":
        return (ax + ay) / np.sqrt(2.0) - r * 0.85
    if shape == "triangle":
        # apex up, base at dy = +r
        return np.maximum(dy - r, (np.sqrt(3.0) * ax - dy) / 2.0 - r * 0.5)
    if shape == "cross":
        arm = r * 0.38
        return np.minimum(np.maximum(ax - arm, ay - r), np.maximum(ay - arm, ax - r))
    if shape == "ring":
        return np.abs(np.hypot(dx, dy) - r * 0.75) - r * 0.28
    if shape == "hbar":
        return np.maximum(ax - r * 1.15, ay - r * 0.4)
    if shape == "vbar":
        return np.maximum(ay - r * 1.15, ax - r * 0.4)
    if shape == "star":
        ang = np.arctan2(dy, dx)
        rad = r * (0.65 + 0.3 * np.cos(5 * ang))
        return np.hypot(dx, dy) - rad
    raise ConfigError(f"unknown shape {shape!r}", module="model-zoo", key="shape")


def render_shape(shape, color, size, rng, spec: ToyWorldSpec) -> np.ndarray:
    c = np.arange(size, dtype=np.float64) + 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    cx = size / 2 + rng.uniform(-1, 1) * spec.position_jitter * size
    cy = size / 2 + rng.uniform(-1, 1) * spec.position_jitter * size
    r = size * 0.3 * (1 + rng.uniform(-1, 1) * spec.scale_jitter)
    d = _sdf(shape, xx - cx, yy - cy, r)
    mask = 1.0 / (1.0 + np.exp(np.clip(d / 0.6, -50, 50)))  # soft edge
    bg = 0.5 + rng.uniform(-spec.background_noise, spec.background_noise, size=(3, size, size))
    col = 0.5 + spec.contrast * (np.asarray(color) - 0.5)
    col = np.clip(col + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3), 0, 1)
    img = bg * (1 - mask) + col[:, None, None] * mask
    return np.clip(img, 0.0, 1.0)


def render_noise_texture(size, rng) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    sigma = rng.uniform(0.5, 3.0)
    field_ = rng.normal(size=(3, size, size))
    field_ = np.stack([gaussian_filter(ch, sigma, mode="wrap") for ch in field_])
    field_ /= field_.std() + 1e-12
    contrast = rng.uniform(0.1, 0.3)
    offset = rng.uniform(-0.15, 0.15, size=(3, 1, 1))
    return np.clip(0.5 + offset + contrast * field_, 0.0, 1.0)


def _split_rng(seed: int, split: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), SPLITS.index(split), 7919])


def generate_toy_dataset(spec: ToyWorldSpec, split: str, seed: int = 0) -> list[Sample]:
    """Deterministic per ``(spec, split, seed)``.

    ID splits are balanced: ``samples_per_class`` images per class, interleaved
    class by class. The ``ood`` split holds ``samples_per_class * K`` images
    spread round-robin over ``spec.ood_kinds``.
    """
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}", module="model-zoo", key="split")
    rng = _split_rng(seed, split)
    size = spec.image_size
    out = []
    if split != "ood":
        for i in range(spec.samples_per_class):
            for k, (shape, color) in enumerate(spec.classes):
                img = render_shape(shape, ID_COLORS[color], size, rng, spec)
                out.append(Sample(img, spec.class_names[k], k, {"shape": shape, "color": color}))
        return out

    n = spec.samples_per_class * spec.num_id_classes
    ood_colors = sorted(OOD_COLORS)
    for i in range(n):
        kind = spec.ood_kinds[i % len(spec.ood_kinds)]
        if kind == "noise_texture":
            out.append(Sample(render_noise_texture(size, rng), kind, -1, {"kind": kind}))
        else:
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            color = ood_colors[int(rng.integers(len(ood_colors)))]
            img = render_shape(shape, OOD_COLORS[color], size, rng, spec)
            out.append(Sample(img, kind, -1, {"kind": kind, "shape": shape, "color": color}))
    return out


def class_render_set(spec: ToyWorldSpec, class_index: int, n: int = 32, seed: int = 0) -> np.ndarray:
    """Canonical renders of one class, used to place text prototypes."""
    shape, color = spec.classes[class_index]
    rng = np.random.default_rng([int(seed), 104729, class_index])
    return np.stack([render_shape(shape, ID_COLORS[color], spec.image_size, rng, spec) for _ in range(n)])


def stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def export_toy_dataset(spec: ToyWorldSpec, root, seed: int = 0, splits=SPLITS) -> Path:
    """Write ``<root>/<split>/<label>/<index>.png`` trees (8-bit PNG)."""
    from PIL import Image

    root = Path(root)
    for split in splits:
        for idx, s in enumerate(generate_toy_dataset(spec, split, seed)):
            d = root / split / s.label
            d.mkdir(parents=True, exist_ok=True)
            arr = np.round(np.transpose(s.image, (1, 2, 0)) * 255).astype(np.uint8)
            Image.fromarray(arr).save(d / f"{idx:05d}.png")
    return root
