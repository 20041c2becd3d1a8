"""Synthetic polygon/ellipse scenes with exact boundary ground truth.

Each scene is a stack of random shapes (convex and star-shaped polygons,
rotated ellipses) over a background. Every region gets a base colour, its
own multi-octave value-noise texture, and the whole image gets additive
Gaussian noise. The ground truth marks pixels whose right or lower
neighbour belongs to a different region.
"""

from pathlib import Path

import numpy as np
from PIL import Image as PILImage, ImageDraw
from scipy import ndimage

from . import io


def value_noise(shape, rng, cells=(32, 16, 8, 4), persistence=0.6):
    """Perlin-style fractal noise in roughly [-1, 1]."""
    h, w = shape
    out = np.zeros(shape)
    amp, total = 1.0, 0.0
    for c in cells:
        grid = rng.uniform(-1, 1, (h // c + 3, w // c + 3))
        up = ndimage.zoom(grid, c, order=3, mode="nearest")
        oy, ox = rng.integers(0, c, size=2)
        out += amp * up[oy : oy + h, ox : ox + w]
        total += amp
        amp *= persistence
    return out / total


def _polygon(rng, size):
    cx, cy = rng.uniform(0.15, 0.85, 2) * size
    r = rng.uniform(0.12, 0.35) * size
    n = int(rng.integers(3, 9))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    # star-shaped when radii vary, near-convex otherwise
    radii = r * (rng.uniform(0.45, 1.0, n) if rng.random() < 0.5 else rng.uniform(0.9, 1.0, n))
    return [(cx + a * np.cos(t), cy + a * np.sin(t)) for a, t in zip(radii, angles)]


def _ellipse(rng, size, n=64):
    cx, cy = rng.uniform(0.15, 0.85, 2) * size
    a, b = rng.uniform(0.08, 0.3, 2) * size
    rot = rng.uniform(0, np.pi)
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    x, y = a * np.cos(t), b * np.sin(t)
    return [
        (cx + xi * np.cos(rot) - yi * np.sin(rot), cy + xi * np.sin(rot) + yi * np.cos(rot))
        for xi, yi in zip(x, y)
    ]


def boundary_map(labels):
    gt = np.zeros(labels.shape, dtype=bool)
    gt[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    gt[:-1, :] |= labels[:-1, :] != labels[1:, :]
    return gt


def make_scene(
    rng, size=128, texture=(0.2, 0.5), texture_cells=(4, 2), noise=(0.01, 0.04), shapes=(3, 7)
):
    """Return ``(image, labels, gt)`` for one random scene."""
    canvas = PILImage.new("I", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    n_shapes = int(rng.integers(shapes[0], shapes[1] + 1))
    for k in range(1, n_shapes + 1):
        pts = _polygon(rng, size) if rng.random() < 0.6 else _ellipse(rng, size)
        draw.polygon(pts, fill=k)
    labels = np.asarray(canvas, dtype=np.int32)
    img = np.zeros((size, size, 3))
    for k in np.unique(labels):
        mask = labels == k
        colour = rng.uniform(0.1, 0.9, 3)
        amp = rng.uniform(*texture)
        tex = value_noise((size, size), rng, texture_cells)
        tint = rng.uniform(0.6, 1.0, 3)
        img[mask] = colour + amp * tex[mask][:, None] * tint
    img += rng.normal(0.0, rng.uniform(*noise), img.shape)
    return np.clip(img, 0.0, 1.0), labels, boundary_map(labels)


def generate(n, seed=0, size=128, **kw):
    """``n`` scenes, each drawn from its own ``(seed, index)`` stream."""
    return [make_scene(np.random.default_rng([seed, i]), size, **kw) for i in range(n)]


def write_corpus(out_dir, n, seed=0, size=128, **kw):
    """Write ``images/NNNN.png`` and ``gt/NNNN.png`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    for i, (img, _, gt) in enumerate(generate(n, seed, size, **kw)):
        io.write_image(out / "images" / f"{i:04d}.png", img)
        io.write_binary(out / "gt" / f"{i:04d}.png", gt)
    return out
