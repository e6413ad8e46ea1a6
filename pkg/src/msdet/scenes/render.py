"""Rasterize a :class:`SceneSpec` into a visible/infrared image pair.

Objects are drawn with 4x4 supersampled coverage at ``true box + shift``
for the modality being rendered. Pixel noise comes from a counter-based
splitmix64 hash so rendering needs no sequential RNG state.
"""
from __future__ import annotations

import numpy as np

from .generate import CLASS_NAMES, MODALITIES, SceneSpec
from .rng import Xoshiro256

_SUPERSAMPLE = 4
_CLASS_RGB = {
    "disc": (0.85, 0.20, 0.20),
    "square": (0.20, 0.80, 0.25),
    "triangle": (0.20, 0.30, 0.90),
    "bar": (0.90, 0.85, 0.20),
}


def _hash_uniform(seed: int, n: int) -> np.ndarray:
    """``n`` uniforms in [0, 1) from splitmix64 applied to counters ``seed + i``."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + (np.arange(1, n + 1, dtype=np.uint64) * np.uint64(0x9E3779B97F4A7C15))
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _smooth_field(rng: Xoshiro256, size: int, cells: int, lo: float, hi: float) -> np.ndarray:
    grid = np.array([[rng.uniform(lo, hi) for _ in range(cells)] for _ in range(cells)])
    t = (np.arange(size) + 0.5) / size * (cells - 1)
    i0 = np.minimum(np.floor(t).astype(int), cells - 2)
    f = t - i0
    rows = grid[i0] * (1 - f)[:, None] + grid[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def drawn_box(obj, modality: int) -> tuple:
    """Normalized ``(cx, cy, w, h)`` where ``obj`` is drawn in ``modality``."""
    cx, cy, w, h = obj.box
    dx, dy = obj.shift[modality]
    return (cx + dx, cy + dy, w, h)


def object_coverage(spec: SceneSpec, obj_index: int, modality: int) -> np.ndarray:
    """Per-pixel coverage in [0, 1] of one object in one modality."""
    size = spec.image_size
    obj = spec.objects[obj_index]
    cov = np.zeros((size, size))
    if obj.visibility[modality] == "absent":
        return cov
    cx, cy, w, h = drawn_box(obj, modality)
    x0, x1 = (cx - w / 2) * size, (cx + w / 2) * size
    y0, y1 = (cy - h / 2) * size, (cy + h / 2) * size
    c0, c1 = max(int(np.floor(x0)), 0), min(int(np.ceil(x1)), size)
    r0, r1 = max(int(np.floor(y0)), 0), min(int(np.ceil(y1)), size)
    if c1 <= c0 or r1 <= r0:
        return cov
    sub = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    px = (np.arange(c0, c1)[:, None] + sub[None, :]).reshape(-1)
    py = (np.arange(r0, r1)[:, None] + sub[None, :]).reshape(-1)
    u = (px[None, :] - x0) / (x1 - x0)
    v = (py[:, None] - y0) / (y1 - y0)
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    shape = CLASS_NAMES[obj.class_id]
    if shape == "disc":
        inside &= (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif shape == "triangle":
        inside &= np.abs(u - 0.5) <= v / 2
    half = obj.occluded_half[modality] if obj.visibility[modality] == "partial" else None
    if half == "left":
        inside &= u >= 0.5
    elif half == "right":
        inside &= u < 0.5
    elif half == "top":
        inside &= v >= 0.5
    elif half == "bottom":
        inside &= v < 0.5
    S = _SUPERSAMPLE
    block = inside.reshape(r1 - r0, S, c1 - c0, S).mean(axis=(1, 3))
    cov[r0:r1, c0:c1] = block
    return cov


def _visible_background(spec: SceneSpec):
    size = spec.image_size
    rng = Xoshiro256(spec.background_seed[0])
    img = np.stack([_smooth_field(rng, size, 4, 0.25, 0.6) for _ in range(3)], axis=-1)
    illum = _smooth_field(rng, size, 3, 0.45, 1.0)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(spec.clutter[0]):
        color = np.array([rng.uniform(0.1, 0.9) for _ in range(3)])
        x0, y0 = rng.uniform(0, size), rng.uniform(0, size)
        if rng.random() < 0.5:
            # thin line segment
            ang = rng.uniform(0, np.pi)
            length = rng.uniform(0.3, 0.8) * size
            dx, dy = np.cos(ang), np.sin(ang)
            t = np.clip((xx - x0) * dx + (yy - y0) * dy, 0, length)
            d = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
            mask = (d <= 0.8).astype(float)
        else:
            # soft-edged patch
            rw, rh = rng.uniform(2, 6), rng.uniform(2, 6)
            mask = ((np.abs(xx - x0) <= rw) & (np.abs(yy - y0) <= rh)).astype(float)
        a = 0.5 * mask[..., None]
        img = img * (1 - a) + color * a
    return img, illum, rng


def _infrared_background(spec: SceneSpec):
    size = spec.image_size
    rng = Xoshiro256(spec.background_seed[1])
    img = _smooth_field(rng, size, 4, 0.08, 0.3)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(spec.clutter[1]):
        x0, y0 = rng.uniform(0, size), rng.uniform(0, size)
        sigma = rng.uniform(2.5, 6.0)
        amp = rng.uniform(0.15, 0.35)
        img = img + amp * np.exp(-((xx - x0) ** 2 + (yy - y0) ** 2) / (2 * sigma * sigma))
    return img, rng


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_modality(spec: SceneSpec, modality, draw_objects: bool = True) -> np.ndarray:
    """Render ``modality`` (index or name): visible ``[S,S,3]``, infrared ``[S,S]`` uint8."""
    m = MODALITIES.index(modality) if isinstance(modality, str) else int(modality)
    size = spec.image_size
    if m == 0:
        img, illum, _ = _visible_background(spec)
        if draw_objects:
            for k, obj in enumerate(spec.objects):
                cov = object_coverage(spec, k, 0)
                if not cov.any():
                    continue
                orng = Xoshiro256(obj.appearance_seed)
                base = np.array(_CLASS_RGB[CLASS_NAMES[obj.class_id]])
                color = np.clip(base + np.array([orng.uniform(-0.08, 0.08) for _ in range(3)]), 0, 1)
                img = img * (1 - cov[..., None]) + color * cov[..., None]
        img = img * illum[..., None]
        noise = _hash_uniform(spec.background_seed[0], size * size * 3).reshape(size, size, 3)
        img = img + 0.06 * (noise - 0.5)
    else:
        img, _ = _infrared_background(spec)
        if draw_objects:
            for k, obj in enumerate(spec.objects):
                cov = object_coverage(spec, k, 1)
                if not cov.any():
                    continue
                orng = Xoshiro256(obj.appearance_seed ^ 0xA5A5A5A5)
                heat = orng.uniform(0.72, 0.95)
                img = img * (1 - cov) + heat * cov
        noise = _hash_uniform(spec.background_seed[1], size * size).reshape(size, size)
        img = img + 0.06 * (noise - 0.5)
    return _quantize(img)


def render_pair(spec: SceneSpec) -> tuple:
    return render_modality(spec, 0), render_modality(spec, 1)
