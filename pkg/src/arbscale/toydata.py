"""Procedural RGB textures for desk-scale training and tests.

Each generator maps a seeded RNG and a size to an ``(H, W, 3)`` float image
in [0, 1]. The mix covers flat regions, sharp edges, periodic structure and
smooth stochastic texture.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import ImageU8, from_float, save_image, to_float


def _color(rng):
    return rng.uniform(0.05, 0.95, 3)


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return xx, yy


def _gradient_bg(rng, size):
    xx, yy = _grid(size)
    a, b = _color(rng), _color(rng)
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * xx + np.sin(theta) * yy) / size
    t = (t - t.min()) / max(np.ptp(t), 1e-9)
    return a * (1 - t[..., None]) + b * t[..., None]


def shapes(rng, size):
    """Flat-shaded rectangles, ellipses and triangles on a gradient."""
    img = _gradient_bg(rng, size)
    xx, yy = _grid(size)
    for _ in range(rng.integers(4, 12)):
        kind = rng.integers(3)
        cx, cy = rng.uniform(0, size, 2)
        rx, ry = rng.uniform(size * 0.05, size * 0.35, 2)
        if kind == 0:
            theta = rng.uniform(0, np.pi)
            u = np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)
            v = -np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy)
            mask = (np.abs(u) < rx) & (np.abs(v) < ry)
        elif kind == 1:
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1
        else:
            pts = rng.uniform(0, size, (3, 2))
            mask = np.ones_like(xx, dtype=bool)
            for i in range(3):
                (x0, y0), (x1, y1), (x2, y2) = pts[i], pts[(i + 1) % 3], pts[(i + 2) % 3]
                side = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
                ref = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
                mask &= side * ref >= 0
        img[mask] = _color(rng)
    return img


def gratings(rng, size):
    """Sum of oriented sinusoids with per-channel mixing."""
    xx, yy = _grid(size)
    img = np.zeros((size, size, 3)) + _color(rng) * 0.5
    for _ in range(rng.integers(2, 4)):
        f = rng.uniform(0.02, 0.22)
        theta = rng.uniform(0, np.pi)
        wave = np.sin(2 * np.pi * f * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(0, 2 * np.pi))
        img += wave[..., None] * rng.uniform(-0.25, 0.25, 3)
    return img


def clouds(rng, size):
    """Multi-octave filtered noise."""
    img = np.zeros((size, size, 3))
    amp = 1.0
    for sigma in (16, 8, 4, 2, 1):
        noise = rng.standard_normal((size, size, 3))
        img += amp * ndimage.gaussian_filter(noise, (sigma, sigma, 0), mode="wrap") * sigma
        amp *= rng.uniform(0.35, 0.6)
    img = (img - img.mean()) / (img.std() + 1e-9)
    mix = rng.uniform(-1, 1, (3, 3)) + np.eye(3)
    img = img @ mix.T
    return 0.5 + 0.18 * img / (np.abs(img).max() / 2 + 1e-9)


def checks(rng, size):
    """Rotated checkerboards or stripes of random period."""
    xx, yy = _grid(size)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(4, 24)
    u = np.cos(theta) * xx + np.sin(theta) * yy
    v = -np.sin(theta) * xx + np.cos(theta) * yy
    if rng.random() < 0.5:
        mask = (np.floor(u / period) + np.floor(v / period)) % 2 == 0
    else:
        mask = np.floor(u / period) % 2 == 0
    a, b = _color(rng), _color(rng)
    return np.where(mask[..., None], a, b)


def strokes(rng, size):
    """Thin dark and light line segments, a stand-in for text and wires."""
    img = _gradient_bg(rng, size) * 0.3 + 0.6
    xx, yy = _grid(size)
    for _ in range(rng.integers(6, 20)):
        p0 = rng.uniform(0, size, 2)
        d = rng.standard_normal(2)
        d /= np.linalg.norm(d) + 1e-9
        length = rng.uniform(size * 0.1, size * 0.6)
        width = rng.uniform(0.6, 2.5)
        rel_x, rel_y = xx - p0[0], yy - p0[1]
        along = rel_x * d[0] + rel_y * d[1]
        across = np.abs(-rel_x * d[1] + rel_y * d[0])
        mask = (along >= 0) & (along <= length) & (across <= width)
        img[mask] = _color(rng) * rng.uniform(0.2, 1.0)
    return img


def cells(rng, size):
    """Voronoi cells with flat colours."""
    n = rng.integers(6, 30)
    seeds = rng.uniform(0, size, (n, 2))
    xx, yy = _grid(size)
    d = (xx[..., None] - seeds[:, 0]) ** 2 + (yy[..., None] - seeds[:, 1]) ** 2
    owner = np.argmin(d, axis=-1)
    palette = rng.uniform(0.05, 0.95, (n, 3))
    return palette[owner]


GENERATORS = (shapes, gratings, clouds, checks, strokes, cells)


def make_texture(seed: int, size: int = 128) -> np.ndarray:
    rng = np.random.default_rng(seed)
    gen = GENERATORS[seed % len(GENERATORS)]
    img = gen(rng, size)
    if rng.random() < 0.5:
        # overlay a second texture through a soft mask for mixed content
        other = GENERATORS[int(rng.integers(len(GENERATORS)))](rng, size)
        mask = ndimage.gaussian_filter(rng.random((size, size)), 6)
        mask = np.clip((mask - mask.mean()) * 20 + 0.5, 0, 1)[..., None]
        img = img * mask + other * (1 - mask)
    return np.clip(img, 0.0, 1.0)


def make_dataset(n: int, size: int = 128, seed: int = 0) -> list[ImageU8]:
    return [from_float(make_texture(seed * 100_003 + i, size)) for i in range(n)]


def write_dataset(directory, n: int, size: int = 128, seed: int = 0, prefix: str = "tex") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(make_dataset(n, size, seed)):
        path = directory / f"{prefix}_{i:04d}.png"
        save_image(img, path)
        paths.append(path)
    return paths


def desk_split(n: int = 240, size: int = 128, n_heldout: int = 20, seed: int = 0
               ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Float train / held-out split used by the desk-scale experiment."""
    if not 0 < n_heldout < n:
        raise ValueError(f"held-out count {n_heldout} must lie in (0, {n})")
    images = [to_float(im) for im in make_dataset(n, size, seed)]
    return images[:-n_heldout], images[-n_heldout:]
