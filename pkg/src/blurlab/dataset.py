"""Procedural datasets: shape/texture classification and shape segmentation.

The classification set ("shapestex") crosses five shapes with two
surface textures, giving ten classes.  The texture pair is the point:
class stripes are coarse enough that heavy defocus attenuates but does
not erase them, while shape outlines survive outright, so class
information degrades asymmetrically under blur -- the phenomenon the
experiments measure.  Every object interior additionally carries a
class-neutral fine grain that sits beyond the heavy-defocus cutoff:
sharp images are full of high-frequency content that blurred images
lack entirely, which keeps models honest about which frequency bands
they rely on.

The segmentation set ("shapeseg") scatters one to three non-overlapping
objects (five foreground classes, background 0) with pixel-center masks.

Every example is a pure function of (seed, split, index), so generation
is reproducible and parallelizable; train and val use disjoint streams.
Rendered images are 8-bit quantized, so saving to PGM and loading back
is bit-exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DatasetFormatError, InvalidParameterError
from .imaging import Image, load_image, quantize8, save_image
from .seeding import derive_seed, generator

__all__ = [
    "SHAPES",
    "TEXTURES",
    "NUM_CLASSES",
    "SEG_CLASSES",
    "Example",
    "SegExample",
    "generate_shapestex",
    "generate_shapeseg",
    "save_shapestex",
    "load_shapestex",
    "save_shapeseg",
    "load_shapeseg",
]

SHAPES = ("circle", "triangle", "square", "star", "annulus")
TEXTURES = ("smooth", "stripes")
NUM_CLASSES = len(SHAPES) * len(TEXTURES)
SEG_CLASSES = len(SHAPES) + 1  # five shapes + background 0

_NOISE_AMPLITUDE = 0.05
_MIN_RENDER = 32


@dataclass(frozen=True)
class Example:
    """One classification example."""

    item_id: int
    label: int
    image: Image


@dataclass(frozen=True)
class SegExample:
    """One segmentation example; mask holds class indices, 0 = background."""

    item_id: int
    image: Image
    mask: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.mask, dtype=np.int64)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)


# ---------------------------------------------------------------------------
# Shape membership at pixel centers


def _shape_mask(
    shape: str, size: int, cy: float, cx: float, radius: float, rotation: float
) -> np.ndarray:
    """Boolean (size, size) mask: pixel centers inside the analytic shape."""
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    dy = ys - cy
    dx = xs - cx
    cos_t, sin_t = np.cos(rotation), np.sin(rotation)
    u = cos_t * dx + sin_t * dy
    v = -sin_t * dx + cos_t * dy
    rho2 = u * u + v * v
    if shape == "circle":
        return rho2 <= radius * radius
    if shape == "square":
        half = radius / np.sqrt(2.0)
        return np.maximum(np.abs(u), np.abs(v)) <= half
    if shape == "triangle":
        # equilateral, circumradius = radius, apex along +v
        verts = [
            (radius * np.cos(a), radius * np.sin(a))
            for a in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3)
        ]
        inside = np.ones_like(u, dtype=bool)
        for i in range(3):
            x1, y1 = verts[i]
            x2, y2 = verts[(i + 1) % 3]
            cross = (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1)
            inside &= cross >= 0
        return inside
    if shape == "star":
        # five-spike radial profile: boundary radius dips to 0.45r between spikes
        phi = np.arctan2(v, u)
        sector = np.mod(phi, 2 * np.pi / 5) / (2 * np.pi / 5)
        tri = 1.0 - 2.0 * np.abs(sector - 0.5)
        bound = radius * (0.45 + 0.55 * tri)
        return rho2 <= bound * bound
    if shape == "annulus":
        inner = 0.5 * radius
        return (rho2 <= radius * radius) & (rho2 >= inner * inner)
    raise InvalidParameterError(f"unknown shape {shape!r}")


def _stripe_field(
    size: int, angle: float, period: float, phase: float
) -> np.ndarray:
    """A +/-1 square wave over the frame with the given direction and period."""
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    coord = xs * np.cos(angle) + ys * np.sin(angle)
    wave = np.sin(2.0 * np.pi * coord / period + phase)
    return np.where(wave >= 0.0, 1.0, -1.0)


def _check_args(count: int, render_size: int) -> None:
    if count < 1:
        raise InvalidParameterError(f"count must be >= 1, got {count}")
    if render_size < _MIN_RENDER:
        raise InvalidParameterError(f"render_size must be >= {_MIN_RENDER}, got {render_size}")


# ---------------------------------------------------------------------------
# Classification


def _render_shapestex(seed: int, split: str, index: int, render_size: int) -> Example:
    rng = generator(derive_seed(seed, "shapestex", split, index))
    label = index % NUM_CLASSES
    shape = SHAPES[label % len(SHAPES)]
    texture = TEXTURES[label // len(SHAPES)]
    size = render_size

    radius = 0.225 * size * (1.0 + rng.uniform(-0.2, 0.2))
    cy = size * (0.5 + rng.uniform(-0.15, 0.15))
    cx = size * (0.5 + rng.uniform(-0.15, 0.15))
    rotation = rng.uniform(0.0, 2.0 * np.pi)
    low = rng.uniform(0.12, 0.38)
    high = rng.uniform(0.62, 0.88)
    fg, bg = (low, high) if rng.random() < 0.5 else (high, low)

    frame = np.full((size, size), bg)
    mask = _shape_mask(shape, size, cy, cx, radius, rotation)
    if texture == "smooth":
        frame[mask] = fg
    else:
        # Periods chosen so heavy defocus attenuates stripes hard but
        # leaves them legible: a disk of radius 4 keeps roughly 40% of
        # the contrast at these wavelengths, so texture stays learnable
        # from blurred examples while a sharp-only model still breaks.
        period = rng.uniform(9.0, 13.0) * size / 96.0
        angle = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.20, 0.30)
        stripes = fg + amp * _stripe_field(size, angle, period, phase)
        frame[mask] = stripes[mask]

    # Class-neutral micro-grain on every object.  Its period is chosen
    # against the disk kernels' transfer functions: a radius-1 disk
    # passes ~80% of a 5-px wave, radius 2 ~40%, and radius 3 and up
    # sit at or past their first zero, so the grain fades monotonically
    # along the defocus ladder and is gone entirely under heavy blur.
    g_period = rng.uniform(4.5, 6.0) * size / 96.0
    g_angle = rng.uniform(0.0, np.pi)
    g_phase = rng.uniform(0.0, 2.0 * np.pi)
    g_amp = rng.uniform(0.07, 0.12)
    grain = _stripe_field(size, g_angle, g_period, g_phase)
    frame[mask] += g_amp * grain[mask]

    frame = frame + rng.uniform(-_NOISE_AMPLITUDE, _NOISE_AMPLITUDE, frame.shape)
    image = quantize8(Image(np.clip(frame, 0.0, 1.0)))
    return Example(item_id=index, label=label, image=image)


def generate_shapestex(
    count: int, render_size: int = 96, seed: int = 0, split: str = "train"
) -> list[Example]:
    """Generate ``count`` classification examples.

    Labels are assigned round-robin (``index % 10``) so class counts stay
    within one of each other.  Each example depends only on
    ``(seed, split, index)``.
    """
    _check_args(count, render_size)
    return [_render_shapestex(seed, split, i, render_size) for i in range(count)]


# ---------------------------------------------------------------------------
# Segmentation

# Radius fraction ranges by object count, chosen so the background
# fraction stays inside [0.4, 0.95] for every shape -- even when crowded
# placements drop all but one object (the lower bound must then still
# cover > 5% of the frame for the smallest-area shape, the triangle).
_SEG_RADIUS_RANGE = {1: (0.21, 0.30), 2: (0.21, 0.26), 3: (0.21, 0.23)}


def _render_shapeseg(seed: int, split: str, index: int, render_size: int) -> SegExample:
    rng = generator(derive_seed(seed, "shapeseg", split, index))
    size = render_size
    n_objects = int(rng.integers(1, 4))
    lo, hi = _SEG_RADIUS_RANGE[n_objects]
    bg = rng.uniform(0.35, 0.65)

    frame = np.full((size, size), bg)
    mask = np.zeros((size, size), dtype=np.int64)
    placed: list[tuple[float, float, float]] = []
    for _ in range(n_objects):
        shape_idx = int(rng.integers(0, len(SHAPES)))
        radius = rng.uniform(lo, hi) * size
        rotation = rng.uniform(0.0, 2.0 * np.pi)
        delta = rng.uniform(0.25, 0.40)
        level = float(np.clip(bg + (delta if rng.random() < 0.5 else -delta), 0.03, 0.97))
        spot = None
        for _attempt in range(40):
            cy = rng.uniform(radius, size - radius)
            cx = rng.uniform(radius, size - radius)
            if all(
                (cy - py) ** 2 + (cx - px) ** 2 >= (radius + pr + 2.0) ** 2
                for py, px, pr in placed
            ):
                spot = (cy, cx)
                break
        if spot is None:
            continue  # crowded frame: drop this object, determinism unaffected
        cy, cx = spot
        member = _shape_mask(SHAPES[shape_idx], size, cy, cx, radius, rotation)
        frame[member] = level
        mask[member] = shape_idx + 1
        placed.append((cy, cx, radius))

    frame = frame + rng.uniform(-_NOISE_AMPLITUDE, _NOISE_AMPLITUDE, frame.shape)
    image = quantize8(Image(np.clip(frame, 0.0, 1.0)))
    return SegExample(item_id=index, image=image, mask=mask)


def generate_shapeseg(
    count: int, render_size: int = 96, seed: int = 0, split: str = "train"
) -> list[SegExample]:
    """Generate ``count`` segmentation examples (masks are class indices)."""
    _check_args(count, render_size)
    return [_render_shapeseg(seed, split, i, render_size) for i in range(count)]


# ---------------------------------------------------------------------------
# On-disk layout: an index file plus one PGM per image (and per mask)


def _write_index(path: str, lines: list[str]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def _read_index(path: str) -> list[tuple[int, int, str]]:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 3:
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected '<id> <label> <path>', got {line!r}"
                )
            try:
                item_id, label = int(fields[0]), int(fields[1])
            except ValueError:
                raise DatasetFormatError(
                    f"{path}:{lineno}: non-integer id or label in {line!r}"
                ) from None
            rows.append((item_id, label, fields[2]))
    return rows


def save_shapestex(examples: list[Example], out_dir: str) -> None:
    """Write ``index.txt`` plus ``images/<id>.pgm`` under ``out_dir``."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    lines = []
    for ex in examples:
        rel = f"images/{ex.item_id}.pgm"
        save_image(ex.image, os.path.join(out_dir, rel))
        lines.append(f"{ex.item_id} {ex.label} {rel}")
    _write_index(os.path.join(out_dir, "index.txt"), lines)


def load_shapestex(in_dir: str) -> list[Example]:
    index_path = os.path.join(in_dir, "index.txt")
    if not os.path.exists(index_path):
        raise DatasetFormatError(f"missing index file {index_path}")
    examples = []
    for item_id, label, rel in _read_index(index_path):
        if label < 0:
            raise DatasetFormatError(f"{index_path}: classification label must be >= 0")
        img_path = os.path.join(in_dir, rel)
        if not os.path.exists(img_path):
            raise DatasetFormatError(f"{index_path}: missing image file {rel!r}")
        examples.append(Example(item_id=item_id, label=label, image=load_image(img_path)))
    return examples


def save_shapeseg(examples: list[SegExample], out_dir: str) -> None:
    """Write ``index.txt``, ``images/<id>.pgm``, and ``masks/<id>.pgm``.

    Mask PGMs store the class index directly as the gray code.  The index
    label column is -1 (segmentation examples have no single label); the
    mask path is ``masks/<id>.pgm`` by convention.
    """
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    lines = []
    for ex in examples:
        rel = f"images/{ex.item_id}.pgm"
        save_image(ex.image, os.path.join(out_dir, rel))
        h, w = ex.mask.shape
        header = f"P5\n{w} {h}\n255\n".encode("ascii")
        with open(os.path.join(out_dir, "masks", f"{ex.item_id}.pgm"), "wb") as fh:
            fh.write(header + ex.mask.astype(np.uint8).tobytes())
        lines.append(f"{ex.item_id} -1 {rel}")
    _write_index(os.path.join(out_dir, "index.txt"), lines)


def load_shapeseg(in_dir: str) -> list[SegExample]:
    index_path = os.path.join(in_dir, "index.txt")
    if not os.path.exists(index_path):
        raise DatasetFormatError(f"missing index file {index_path}")
    examples = []
    for item_id, label, rel in _read_index(index_path):
        if label != -1:
            raise DatasetFormatError(f"{index_path}: segmentation label column must be -1")
        img_path = os.path.join(in_dir, rel)
        mask_path = os.path.join(in_dir, "masks", f"{item_id}.pgm")
        for p in (img_path, mask_path):
            if not os.path.exists(p):
                raise DatasetFormatError(f"{index_path}: missing file {p!r}")
        mask_img = load_image(mask_path)
        mask = np.floor(mask_img.values[:, :, 0] * 255.0 + 0.5).astype(np.int64)
        examples.append(SegExample(item_id=item_id, image=load_image(img_path), mask=mask))
    return examples
