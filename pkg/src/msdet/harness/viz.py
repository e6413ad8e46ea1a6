"""PPM overlays of selected queries and deformable sampling points."""
from __future__ import annotations

import os

import numpy as np

from ..errors import ContractError
from ..msattn import DetectorNet
from ..scenes import write_pnm

RED = (255, 0, 0)
BLUE = (0, 0, 255)
LEVEL_COLORS = ((0, 0, 255), (0, 255, 0), (255, 0, 0))   # low, middle, high level


def _canvas(img: np.ndarray, scale: int) -> np.ndarray:
    """uint8 RGB copy of ``img`` (gray is replicated) enlarged by ``scale``."""
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    return np.repeat(np.repeat(img, scale, axis=0), scale, axis=1).copy()


def to_pixel(xy, size: int) -> tuple:
    """Normalized ``(x, y)`` -> integer pixel, clamped to the canvas."""
    x = int(np.clip(np.floor(xy[0] * size), 0, size - 1))
    y = int(np.clip(np.floor(xy[1] * size), 0, size - 1))
    return x, y


def box_rect(box, size: int) -> tuple:
    """Normalized ``(cx, cy, w, h)`` -> inclusive pixel rectangle ``(x0, y0, x1, y1)``.

    Uses the same floor-and-clamp rule as :func:`to_pixel`, so any point of
    the box maps to a pixel inside the rectangle.
    """
    cx, cy, w, h = (float(v) for v in box)
    x0, y0 = to_pixel((cx - w / 2, cy - h / 2), size)
    x1, y1 = to_pixel((cx + w / 2, cy + h / 2), size)
    return x0, y0, x1, y1


def draw_rect(img, rect, color):
    x0, y0, x1, y1 = rect
    img[y0, x0:x1 + 1] = color
    img[y1, x0:x1 + 1] = color
    img[y0:y1 + 1, x0] = color
    img[y0:y1 + 1, x1] = color


def draw_dot(img, px, radius: int, color):
    x, y = px
    H, W = img.shape[:2]
    y0, y1 = max(0, y - radius), min(H, y + radius + 1)
    x0, x1 = max(0, x - radius), min(W, x + radius + 1)
    ys, xs = np.ogrid[y0:y1, x0:x1]
    img[y0:y1, x0:x1][(xs - x) ** 2 + (ys - y) ** 2 <= radius * radius] = color


def _pair(visible, infrared):
    vis = np.asarray(visible)
    ir = np.asarray(infrared)
    if vis.ndim != 3 or ir.ndim != 2 or vis.shape[:2] != ir.shape[:2]:
        raise ContractError(f"expected one image pair [S,S,3] and [S,S], got {vis.shape} and {ir.shape}")
    return vis, ir


def viz_queries(net: DetectorNet, visible, infrared, out_dir, highlight: int = 10, scale: int = 4) -> dict:
    """Draw every selected query's reference point on its provenance image.

    The ``highlight`` best-scoring queries are red and get their proposal
    box drawn; the rest are blue. Tokens selected from summed features
    (selection without provenance) are drawn on a single ``fused`` overlay
    over the visible image. Returns ``{overlay: [(query, x, y), ...]}`` and
    writes ``queries_<overlay>.ppm`` files.
    """
    vis, ir = _pair(visible, infrared)
    out = net(vis, ir, record=False)
    sel = out.selection
    ref = out.anchors[0][0, :out.num_queries]
    prov = np.asarray(sel["modality"][0])
    score = np.asarray(sel["score"][0])
    top = set(np.argsort(-score, kind="stable")[:highlight].tolist())
    images = {0: ("visible", vis), 1: ("infrared", ir), -1: ("fused", vis)}
    size = vis.shape[0] * scale
    os.makedirs(out_dir, exist_ok=True)
    drawn = {}
    for m in sorted(set(prov.tolist())):
        name, img = images[int(m)]
        canvas = _canvas(img, scale)
        pts = []
        queries = [q for q in range(len(prov)) if prov[q] == m]
        # blue first so red points stay visible on top
        for q in sorted(queries, key=lambda q: q in top):
            px = to_pixel(ref[q, :2], size)
            if q in top:
                draw_rect(canvas, box_rect(ref[q], size), RED)
            draw_dot(canvas, px, 1, RED if q in top else BLUE)
            pts.append((q, px[0], px[1]))
        write_pnm(os.path.join(out_dir, f"queries_{name}.ppm"), canvas)
        drawn[name] = sorted(pts)
    return drawn


def viz_sampling(net: DetectorNet, visible, infrared, query: int, out_dir, scale: int = 4) -> dict:
    """Per decoder layer and modality image, draw one query's sampling points.

    Points are colored by feature level (blue, green, red from fine to
    coarse), with radius and brightness growing with the attention weight;
    the query's anchor box is drawn in white. When attention reads the
    summed maps, the same points appear on both images. Returns
    ``{(layer, modality): {"rect": ..., "points": [(x, y, level, weight)]}}``
    and writes ``sampling_l<d>_<modality>.ppm`` files.
    """
    vis, ir = _pair(visible, infrared)
    n = net.cfg.queries
    if not 0 <= int(query) < n:
        raise ContractError(f"query index {query} outside [0, {n})")
    q = int(query)
    out = net(vis, ir, record=True)
    size = vis.shape[0] * scale
    names = [m for m in ("visible", "infrared") if m in net.cfg.modalities]
    slots = {m: (names.index(m) if net.cfg.attended_modalities == len(names) else 0)
             for m in names}
    images = {"visible": vis, "infrared": ir}
    os.makedirs(out_dir, exist_ok=True)
    drawn = {}
    for d, rec in enumerate(out.records):
        w = rec["weights"][0]            # [M,H,L,N,K]
        loc = rec["locations"][0]        # [M,H,L,N,K,2]
        anchor = rec["anchor"][0, q]
        rect = box_rect(anchor, size)
        for name in ("visible", "infrared"):
            canvas = _canvas(images[name], scale)
            draw_rect(canvas, rect, (255, 255, 255))
            pts = []
            if name in slots:
                m = slots[name]
                wq = w[m, :, :, q]       # [H,L,K]
                peak = max(float(wq.max()), 1e-12)
                order = np.argsort(wq, axis=None, kind="stable")   # faint points first
                for flat in order:
                    h, lv, k = np.unravel_index(flat, wq.shape)
                    a = float(wq[h, lv, k])
                    rel = a / peak
                    color = tuple(int(round(c * (0.3 + 0.7 * rel))) for c in LEVEL_COLORS[lv % 3])
                    px = to_pixel(loc[m, h, lv, q, k], size)
                    draw_dot(canvas, px, max(0, int(round(3 * rel))), color)
                    pts.append((px[0], px[1], int(lv), a))
            write_pnm(os.path.join(out_dir, f"sampling_l{d}_{name}.ppm"), canvas)
            drawn[(d, name)] = {"rect": rect, "points": pts}
    return drawn
