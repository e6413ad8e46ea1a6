"""Box geometry on normalized ``(cx, cy, w, h)`` boxes."""
from __future__ import annotations

import numpy as np

from .. import numcore as nc
from ..errors import ContractError


def _check_extents(data: np.ndarray, what: str):
    if data.size and not (data[..., 2:4] > 0).all():
        raise ContractError(f"{what}: boxes must have positive width and height")


def to_corners(b):
    """``(cx, cy, w, h)`` -> ``(x0, y0, x1, y1)``; works on arrays and Tensors."""
    if isinstance(b, nc.Tensor):
        c, s = b[..., 0:2], b[..., 2:4] * 0.5
        return nc.concat([c - s, c + s], axis=-1)
    b = np.asarray(b, dtype=np.float64)
    c, s = b[..., 0:2], b[..., 2:4] * 0.5
    return np.concatenate([c - s, c + s], axis=-1)


def _iou_parts_np(a, b):
    ca, cb = to_corners(a), to_corners(b)
    lt = np.maximum(ca[..., :2], cb[..., :2])
    rb = np.minimum(ca[..., 2:], cb[..., 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    hlt = np.minimum(ca[..., :2], cb[..., :2])
    hrb = np.maximum(ca[..., 2:], cb[..., 2:])
    hull = (hrb[..., 0] - hlt[..., 0]) * (hrb[..., 1] - hlt[..., 1])
    return inter, union, hull


def box_iou_np(a, b) -> np.ndarray:
    """Pairwise IoU matrix ``[len(a), len(b)]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter, union, _ = _iou_parts_np(a[:, None], b[None])
    return inter / union


def giou_np(a, b) -> np.ndarray:
    """Pairwise generalized IoU matrix ``[len(a), len(b)]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    _check_extents(a, "giou")
    _check_extents(b, "giou")
    inter, union, hull = _iou_parts_np(a[:, None], b[None])
    return inter / union - (hull - union) / hull


def iou(a, b):
    """Elementwise IoU of paired boxes ``[..., 4]`` (differentiable for Tensors)."""
    if not (isinstance(a, nc.Tensor) or isinstance(b, nc.Tensor)):
        inter, union, _ = _iou_parts_np(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
        return inter / union
    a, b = nc.as_tensor(a), nc.as_tensor(b)
    ca, cb = to_corners(a), to_corners(b)
    wh = nc.clamp(nc.minimum(ca[..., 2:4], cb[..., 2:4]) - nc.maximum(ca[..., 0:2], cb[..., 0:2]), lo=0.0)
    inter = wh[..., 0] * wh[..., 1]
    return inter / (a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter)


def giou(a, b):
    """Elementwise generalized IoU of paired boxes ``[..., 4]``.

    Accepts Tensors (differentiable) or arrays; returns the same kind.
    """
    if not (isinstance(a, nc.Tensor) or isinstance(b, nc.Tensor)):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        _check_extents(a, "giou")
        _check_extents(b, "giou")
        inter, union, hull = _iou_parts_np(a, b)
        return inter / union - (hull - union) / hull
    a, b = nc.as_tensor(a), nc.as_tensor(b)
    _check_extents(a.data, "giou")
    _check_extents(b.data, "giou")
    ca, cb = to_corners(a), to_corners(b)
    lt = nc.maximum(ca[..., 0:2], cb[..., 0:2])
    rb = nc.minimum(ca[..., 2:4], cb[..., 2:4])
    wh = nc.clamp(rb - lt, lo=0.0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = a[..., 2] * a[..., 3]
    area_b = b[..., 2] * b[..., 3]
    union = area_a + area_b - inter
    hlt = nc.minimum(ca[..., 0:2], cb[..., 0:2])
    hrb = nc.maximum(ca[..., 2:4], cb[..., 2:4])
    hwh = hrb - hlt
    hull = hwh[..., 0] * hwh[..., 1]
    return inter / union - (hull - union) / hull
