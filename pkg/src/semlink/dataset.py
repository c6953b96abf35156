"""ShapeWorld-mini: a procedurally generated labeled image corpus.

Each image is one anti-aliased shape on a dark background, described by
a (shape, color, position) attribute triple drawn from closed
vocabularies of 4 x 4 x 5 = 80 cells.  The triple doubles as the
image's ground-truth prompt list.  Per-instance jitter (sub-pixel
offset, size variation, texture noise) makes every cell a small family
of distinct images while keeping attributes recoverable by brute-force
template matching.

Images are 32x32x3 by default (64x64 selectable), float64 values in
[0, 1] that are exactly representable in float32 so that the "SWM1"
container round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import FormatError
from .rng import Rng

__all__ = [
    "SHAPES", "COLORS", "POSITIONS", "VOCAB", "Attributes", "LabeledImage",
    "JitterConfig", "Dataset", "generate_shapeworld", "attributes_to_prompts",
    "render_shape", "canonical_templates", "match_attributes",
    "save_dataset", "load_dataset", "cell_index", "attributes_from_cell",
]

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
POSITIONS = ("top-left", "top-right", "bottom-left", "bottom-right", "center")
VOCAB = {"shape": SHAPES, "color": COLORS, "position": POSITIONS}

_RGB = {
    "red": (1.0, 0.15, 0.15),
    "green": (0.15, 1.0, 0.15),
    "blue": (0.2, 0.35, 1.0),
    "yellow": (1.0, 1.0, 0.15),
}
_BACKGROUND = 0.08
_RENDER_STREAM = 0xD5
_SEED_MIX = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Attributes:
    """One (shape, color, position) triple from the closed vocabularies."""
    shape: str
    color: str
    position: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.position not in POSITIONS:
            raise ValueError(f"unknown position {self.position!r}")

    @property
    def indices(self) -> tuple[int, int, int]:
        return (SHAPES.index(self.shape), COLORS.index(self.color),
                POSITIONS.index(self.position))


def cell_index(a: Attributes) -> int:
    """Flat index of the attribute cell in [0, 80)."""
    si, ci, pi = a.indices
    return (si * len(COLORS) + ci) * len(POSITIONS) + pi


def attributes_from_cell(cell: int) -> Attributes:
    si, rem = divmod(cell, len(COLORS) * len(POSITIONS))
    ci, pi = divmod(rem, len(POSITIONS))
    return Attributes(SHAPES[si], COLORS[ci], POSITIONS[pi])


def attributes_to_prompts(a: Attributes) -> list[str]:
    """Ground-truth prompt words, in fixed (shape, color, position) order."""
    return [a.shape, a.color, a.position]


@dataclass(frozen=True)
class JitterConfig:
    """Per-instance render variation; disabled gives canonical images."""
    enabled: bool = True
    offset_px: float = 2.0
    size_frac: float = 0.15
    noise_sigma: float = 0.05


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray          # (size, size, 3) float64 in [0, 1]
    attributes: Attributes
    instance_seed: int


@dataclass
class Dataset:
    """Train/test splits over the shared closed vocabularies."""
    train: list[LabeledImage]
    test: list[LabeledImage]
    size: int = 32
    vocab: dict = field(default_factory=lambda: dict(VOCAB))

    @property
    def items(self) -> list[LabeledImage]:
        return list(self.train) + list(self.test)

    def by_class(self, split: str = "train") -> dict[str, list[LabeledImage]]:
        groups: dict[str, list[LabeledImage]] = {s: [] for s in SHAPES}
        for item in getattr(self, split):
            groups[item.attributes.shape].append(item)
        return groups


def _position_center(position: str, size: int) -> tuple[float, float]:
    lo, hi, mid = size * 0.25, size * 0.75, size * 0.5
    return {
        "top-left": (lo, lo),
        "top-right": (lo, hi),
        "bottom-left": (hi, lo),
        "bottom-right": (hi, hi),
        "center": (mid, mid),
    }[position]


def _shape_sdf(shape: str, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    """Signed distance to the shape boundary (negative inside)."""
    if shape == "circle":
        return np.sqrt(dy ** 2 + dx ** 2) - r
    if shape == "square":
        s = 0.88 * r
        return np.maximum(np.abs(dy), np.abs(dx)) - s
    if shape == "triangle":
        # Upward triangle: top vertex and two base corners on the circle of
        # radius r; inside = intersection of the three edge half-planes.
        verts = np.array([(-r, 0.0), (0.75 * r, -0.87 * r), (0.75 * r, 0.87 * r)])
        d = np.full(dy.shape, -np.inf)
        for i in range(3):
            p0, p1 = verts[i], verts[(i + 1) % 3]
            ey, ex = p1 - p0
            # Outward normal of edge (p0 -> p1) for counter-clockwise order.
            ny, nx = ex, -ey
            norm = np.hypot(ny, nx)
            d = np.maximum(d, ((dy - p0[0]) * ny + (dx - p0[1]) * nx) / norm)
        return d
    if shape == "cross":
        arm = 0.38 * r
        horiz = np.maximum(np.abs(dy) - arm, np.abs(dx) - r)
        vert = np.maximum(np.abs(dy) - r, np.abs(dx) - arm)
        return np.minimum(horiz, vert)
    raise ValueError(f"unknown shape {shape!r}")


def render_shape(attributes: Attributes, instance_seed: int, size: int = 32,
                 jitter: JitterConfig = JitterConfig()) -> np.ndarray:
    """Render one labeled image; bit-identical for identical arguments."""
    rng = Rng(instance_seed, _RENDER_STREAM)
    cy, cx = _position_center(attributes.position, size)
    r = 0.16 * size
    if jitter.enabled:
        off = rng.uniform((2,), -jitter.offset_px, jitter.offset_px)
        cy += off[0] * size / 32.0
        cx += off[1] * size / 32.0
        r *= 1.0 + rng.uniform((1,), -jitter.size_frac, jitter.size_frac)[0]

    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5,
                         indexing="ij")
    sdf = _shape_sdf(attributes.shape, ys - cy, xs - cx, r)
    alpha = np.clip(0.5 - sdf, 0.0, 1.0)

    color = np.array(_RGB[attributes.color])
    img = _BACKGROUND + alpha[:, :, None] * (color - _BACKGROUND)
    if jitter.enabled and jitter.noise_sigma > 0:
        img = img + jitter.noise_sigma * rng.normal((size, size, 3))
    img = np.clip(img, 0.0, 1.0)
    # Quantize now so the f32 wire/container formats are lossless.
    return img.astype(np.float32).astype(np.float64)


def _instance_seed(master_seed: int, index: int) -> int:
    return (master_seed * _SEED_MIX + index) & _MASK64


def generate_shapeworld(n_train: int, n_test: int, seed: int,
                        jitter: JitterConfig = JitterConfig(),
                        size: int = 32) -> Dataset:
    """Generate a balanced ShapeWorld-mini corpus.

    Attribute cells are assigned round-robin within each split, so cell
    counts differ by at most one.  Item `i` is rendered from a seed
    derived from (seed, i), making generation reproducible per item.
    """
    if n_train < 1 and n_test < 1:
        raise ValueError("need at least one item")
    n_cells = len(SHAPES) * len(COLORS) * len(POSITIONS)

    def make_split(count: int, offset: int) -> list[LabeledImage]:
        items = []
        for i in range(count):
            attrs = attributes_from_cell(i % n_cells)
            iseed = _instance_seed(seed, offset + i)
            items.append(LabeledImage(render_shape(attrs, iseed, size, jitter),
                                      attrs, iseed))
        return items

    return Dataset(train=make_split(n_train, 0),
                   test=make_split(n_test, n_train), size=size)


@lru_cache(maxsize=4)
def canonical_templates(size: int = 32) -> tuple[np.ndarray, tuple[Attributes, ...]]:
    """All 80 jitter-free cell renders, used as matching templates."""
    disabled = JitterConfig(enabled=False)
    attrs = tuple(attributes_from_cell(c) for c in range(80))
    imgs = np.stack([render_shape(a, 0, size, disabled) for a in attrs])
    return imgs, attrs


def match_attributes(image: np.ndarray) -> Attributes:
    """Recover attributes by nearest-L2 search over the 80 templates."""
    size = image.shape[0]
    templates, attrs = canonical_templates(size)
    d2 = ((templates - image[None]) ** 2).sum(axis=(1, 2, 3))
    return attrs[int(np.argmin(d2))]


_MAGIC = b"SWM1"


def save_dataset(dataset: Dataset, path) -> None:
    """Write the "SWM1" container (bit-exact round trip)."""
    parts = [_MAGIC, struct.pack("<III", len(dataset.train),
                                 len(dataset.test), dataset.size)]
    for item in dataset.items:
        si, ci, pi = item.attributes.indices
        parts.append(struct.pack("<BBBQ", si, ci, pi, item.instance_seed))
        parts.append(item.image.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_dataset(path) -> Dataset:
    """Read a "SWM1" container, validating structure byte by byte."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}",
                          offset=0)
    if len(blob) < 16:
        raise FormatError("truncated header", offset=len(blob))
    n_train, n_test, size = struct.unpack_from("<III", blob, 4)
    item_bytes = 11 + size * size * 3 * 4
    cursor = 16
    splits: list[list[LabeledImage]] = [[], []]
    for split, count in zip(splits, (n_train, n_test)):
        for _ in range(count):
            if cursor + item_bytes > len(blob):
                raise FormatError("truncated item payload", offset=cursor)
            si, ci, pi, iseed = struct.unpack_from("<BBBQ", blob, cursor)
            try:
                attrs = Attributes(SHAPES[si], COLORS[ci], POSITIONS[pi])
            except (IndexError, ValueError) as exc:
                raise FormatError(f"invalid attribute bytes: {exc}",
                                  offset=cursor) from exc
            pixels = np.frombuffer(blob, dtype="<f4", count=size * size * 3,
                                   offset=cursor + 11)
            img = pixels.astype(np.float64).reshape(size, size, 3)
            split.append(LabeledImage(img, attrs, iseed))
            cursor += item_bytes
    if cursor != len(blob):
        raise FormatError("trailing bytes after last item", offset=cursor)
    return Dataset(train=splits[0], test=splits[1], size=size)
