"""Set-prediction losses: IoU-aware classification, box regression and denoising."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import numcore as nc
from ..errors import ConfigError, ContractError
from .geometry import giou, giou_np, iou
from .hungarian import hungarian_match

BOX_EPS = 1e-4


@dataclass(frozen=True)
class GroundTruth:
    """Objects of one image: ``labels`` ``[G]`` and normalized ``boxes`` ``[G, 4]``."""

    labels: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(labels) != len(boxes):
            raise ContractError(f"{len(labels)} labels for {len(boxes)} boxes")
        if len(boxes) and not ((boxes > 0) & (boxes < 1)).all():
            raise ContractError("ground-truth boxes must lie in (0, 1)^4")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "boxes", boxes)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_rows(cls, rows) -> "GroundTruth":
        """Build from ``(class, cx, cy, w, h)`` tuples."""
        rows = list(rows)
        return cls([r[0] for r in rows], [r[1:5] for r in rows])


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    alpha: float = 0.75
    gamma: float = 2.0
    cls_norm: str = "gt"   # "gt": sum / #ground truths; "queries": mean over queries


@dataclass
class LossBreakdown:
    """Loss components; ``cls``/``l1``/``giou`` are the final-layer raw terms."""

    cls: nc.Tensor
    l1: nc.Tensor
    giou: nc.Tensor
    dn: nc.Tensor
    aux: list
    enc: nc.Tensor
    total: nc.Tensor
    matches: list = field(default_factory=list)

    def values(self) -> dict:
        out = {"total": self.total.item(), "cls": self.cls.item(), "l1": self.l1.item(),
               "giou": self.giou.item(), "dn": self.dn.item(), "enc": self.enc.item()}
        for i, a in enumerate(self.aux):
            out[f"aux{i}"] = a.item()
        return out


# ------------------------------------------------------------------- vfl
def vfl_loss(p, q, alpha: float = 0.75, gamma: float = 2.0, eps: float = 1e-12):
    """Elementwise IoU-aware classification loss.

    ``q > 0``: ``-q (q ln p + (1-q) ln(1-p))``; ``q == 0``:
    ``-alpha p^gamma ln(1-p)``. ``q`` is a constant target; ``p`` is clamped
    to ``[eps, 1-eps]``.
    """
    p = nc.clamp(nc.as_tensor(p), eps, 1.0 - eps)
    q = nc.as_tensor(q)
    pos = q.data > 0
    lp, l1p = nc.log(p), nc.log(1.0 - p)
    pos_term = (lp * (q * q) + l1p * (q * (1.0 - q))) * -1.0
    p_gamma = p * p if gamma == 2.0 else nc.exp(nc.log(p) * gamma)
    neg_term = p_gamma * l1p * (-alpha)
    return nc.where(pos, pos_term, neg_term)


def vfl_set(logits, b_idx, q_idx, c_idx, target, alpha, gamma):
    """Summed VFL over all logits, with IoU targets ``target`` at the given entries.

    Every entry is first charged as background; matched entries then swap
    their background term for the positive term. ``target`` is detached.
    """
    p = nc.sigmoid(logits)
    total = nc.tsum(vfl_loss(p, np.zeros(p.shape), alpha, gamma))
    if len(b_idx):
        pm = p[b_idx, q_idx, c_idx]
        q = target.detach()
        total = total + nc.tsum(vfl_loss(pm, q, alpha, gamma) - vfl_loss(pm, np.zeros(pm.shape), alpha, gamma))
    return total


# ----------------------------------------------------------------- matching
def match_cost(probs: np.ndarray, boxes: np.ndarray, gt: GroundTruth, w: LossWeights) -> np.ndarray:
    """``[#queries, #gt]`` cost: class (1 - p), L1 and (1 - GIoU) terms."""
    if len(gt) == 0:
        return np.zeros((len(boxes), 0))
    c_cls = 1.0 - probs[:, gt.labels]
    c_l1 = np.abs(boxes[:, None, :] - gt.boxes[None, :, :]).sum(-1)
    c_giou = 1.0 - giou_np(boxes, gt.boxes)
    return w.cls * c_cls + w.l1 * c_l1 + w.giou * c_giou


def match_batch(logits, boxes, gts, w: LossWeights) -> list:
    probs = nc.sigmoid(logits.data).data
    return [hungarian_match(match_cost(probs[b], boxes.data[b], gt, w)) for b, gt in enumerate(gts)]


def set_loss(logits, boxes, gts, w: LossWeights, matches=None):
    """Classification / L1 / GIoU terms for one prediction set.

    ``logits`` ``[B, Q, ncls]``, ``boxes`` ``[B, Q, 4]``. The VFL is summed
    over queries and classes and divided by the number of ground truths
    (or averaged over queries with ``cls_norm="queries"``); box terms are
    summed over matched pairs and divided by the number of ground truths.
    Returns ``(cls, l1, giou, matches)``.
    """
    B, Q, ncls = logits.shape
    if matches is None:
        matches = match_batch(logits, boxes, gts, w)
    num_gt = max(1, sum(len(g) for g in gts))
    bi, qi, tgt, lab = [], [], [], []
    for b, (m, gt) in enumerate(zip(matches, gts)):
        if m.pairs:
            bi.append(np.full(len(m.pairs), b))
            qi.append(m.query_index)
            tgt.append(gt.boxes[m.gt_index])
            lab.append(gt.labels[m.gt_index])
    denom = num_gt if w.cls_norm == "gt" else B * Q
    if not bi:
        cls = vfl_set(logits, [], [], [], None, w.alpha, w.gamma) * (1.0 / denom)
        zero = nc.Tensor(0.0)
        return cls, zero, zero, matches
    bi, qi, tgt, lab = np.concatenate(bi), np.concatenate(qi), np.concatenate(tgt), np.concatenate(lab)
    pred = boxes[bi, qi]
    cls = vfl_set(logits, bi, qi, lab, iou(pred, tgt), w.alpha, w.gamma) * (1.0 / denom)
    l1 = nc.tsum(nc.tabs(pred - tgt)) * (1.0 / num_gt)
    gl = nc.tsum(1.0 - giou(pred, tgt)) * (1.0 / num_gt)
    return cls, l1, gl, matches


def _weighted(cls, l1, gl, w):
    return cls * w.cls + l1 * w.l1 + gl * w.giou


# ---------------------------------------------------------------- denoising
@dataclass(frozen=True)
class DenoiseGroup:
    """Noised copies of every ground truth of one image."""

    labels: np.ndarray
    boxes: np.ndarray
    kind: str
    origin: np.ndarray
    flipped: np.ndarray


def build_denoise_groups(gt: GroundTruth, groups: int, box_noise: float, label_flip: float,
                         rng: np.random.Generator, num_classes: int, num_queries: int = 0):
    """Noised positive/negative query groups and their attention mask.

    Each of the ``groups`` rounds yields a positive group (jitter within
    ``box_noise``) followed by a negative group (doubled jitter). The mask
    covers ``num_queries`` matching queries followed by the dn queries in
    group order; True entries are blocked. Matching queries and dn queries
    never see each other; dn queries see only their own round.
    """
    if box_noise < 0:
        raise ConfigError(f"box noise must be >= 0, got {box_noise}")
    if not 0.0 <= label_flip <= 1.0:
        raise ConfigError(f"label flip probability must be in [0, 1], got {label_flip}")
    G = len(gt)
    out = []
    for _ in range(groups if G else 0):
        for kind, scale in (("positive", 1.0), ("negative", 2.0)):
            lam = box_noise * scale
            b = gt.boxes
            jit = rng.uniform(-1.0, 1.0, size=(G, 4))
            cxcy = b[:, :2] + jit[:, :2] * lam * b[:, 2:] / 2
            wh = b[:, 2:] * (1.0 + jit[:, 2:] * lam)
            boxes = np.clip(np.concatenate([cxcy, wh], axis=1), BOX_EPS, 1.0 - BOX_EPS)
            flip = rng.random(G) < label_flip
            labels = gt.labels.copy()
            if num_classes > 1:
                other = rng.integers(0, num_classes - 1, size=G)
                other = other + (other >= labels)
                labels = np.where(flip, other, labels)
            else:
                flip = np.zeros(G, dtype=bool)
            out.append(DenoiseGroup(labels, boxes, kind, np.arange(G), flip))
    n_dn = 2 * G * (groups if G else 0)
    mask = dn_mask(num_queries, [len(g.labels) * 2 for g in out[::2]])
    assert mask.shape == (num_queries + n_dn,) * 2
    return out, mask


def dn_mask(num_queries: int, round_sizes, valid=None) -> np.ndarray:
    """Attention mask for ``num_queries`` matching queries plus dn rounds.

    ``valid`` optionally flags real dn entries (pads only see themselves).
    """
    total = num_queries + int(sum(round_sizes))
    mask = np.zeros((total, total), dtype=bool)
    mask[:num_queries, num_queries:] = True
    mask[num_queries:, :num_queries] = True
    start = num_queries
    bounds = []
    for size in round_sizes:
        bounds.append((start, start + size))
        start += size
    if bounds:
        mask[num_queries:, num_queries:] = True
        for a, b in bounds:
            mask[a:b, a:b] = False
    if valid is not None:
        pad = num_queries + np.nonzero(~np.asarray(valid, dtype=bool))[0]
        mask[:, pad] = True
        mask[pad, pad] = False
    return mask


@dataclass
class DenoiseBatch:
    """Padded dn queries for a batch, ready to append to the model input."""

    labels: np.ndarray      # [B, n_dn]
    boxes: np.ndarray       # [B, n_dn, 4]
    mask: np.ndarray        # [B, N + n_dn, N + n_dn]
    positive: np.ndarray    # [B, n_dn] bool, real positive entries
    negative: np.ndarray    # [B, n_dn] bool, real negative entries
    origin: np.ndarray      # [B, n_dn] gt index (-1 for pads)

    @property
    def count(self) -> int:
        return self.labels.shape[1]


def build_denoise_batch(gts, groups: int, box_noise: float, label_flip: float,
                        rng: np.random.Generator, num_classes: int, num_queries: int) -> DenoiseBatch | None:
    """Pad per-image dn groups to the largest ground-truth count in the batch."""
    gmax = max((len(g) for g in gts), default=0)
    if groups <= 0 or gmax == 0:
        return None
    B = len(gts)
    n_dn = 2 * groups * gmax
    labels = np.zeros((B, n_dn), dtype=np.int64)
    boxes = np.full((B, n_dn, 4), 0.5)
    pos = np.zeros((B, n_dn), dtype=bool)
    neg = np.zeros((B, n_dn), dtype=bool)
    origin = np.full((B, n_dn), -1, dtype=np.int64)
    masks = []
    for b, gt in enumerate(gts):
        grp, _ = build_denoise_groups(gt, groups, box_noise, label_flip, rng, num_classes)
        G = len(gt)
        for k, g in enumerate(grp):
            s = k * gmax
            labels[b, s:s + G] = g.labels
            boxes[b, s:s + G] = g.boxes
            origin[b, s:s + G] = g.origin
            (pos if g.kind == "positive" else neg)[b, s:s + G] = True
        masks.append(dn_mask(num_queries, [2 * gmax] * groups, valid=pos[b] | neg[b]))
    return DenoiseBatch(labels, boxes, np.stack(masks), pos, neg, origin)


def dn_loss(logits, boxes, dn: DenoiseBatch, gts, w: LossWeights):
    """Known-assignment loss for the dn slice ``[B, n_dn, ...]`` of one layer.

    Positives are supervised by their origin ground truth, negatives as
    background; pad entries carry no loss.
    """
    B, n, ncls = logits.shape
    num_gt = max(1, sum(len(g) for g in gts))
    real = (dn.positive | dn.negative)[..., None].astype(np.float64)
    b_idx, q_idx = np.nonzero(dn.positive)
    origin = dn.origin[b_idx, q_idx]
    tgt = np.array([gts[b].boxes[o] for b, o in zip(b_idx, origin)]).reshape(-1, 4)
    lab = np.array([gts[b].labels[o] for b, o in zip(b_idx, origin)], dtype=np.int64)
    denom = num_gt if w.cls_norm == "gt" else max(1.0, float(real.sum()))
    p = nc.sigmoid(logits)
    cls = nc.tsum(vfl_loss(p, np.zeros(p.shape), w.alpha, w.gamma) * real)
    if not len(b_idx):
        return cls * (w.cls / denom)
    pred = boxes[b_idx, q_idx]
    pm = p[b_idx, q_idx, lab]
    cls = cls + nc.tsum(vfl_loss(pm, iou(pred, tgt).detach(), w.alpha, w.gamma)
                        - vfl_loss(pm, np.zeros(pm.shape), w.alpha, w.gamma))
    cls = cls * (1.0 / denom)
    l1 = nc.tsum(nc.tabs(pred - tgt)) * (1.0 / num_gt)
    gl = nc.tsum(1.0 - giou(pred, tgt)) * (1.0 / num_gt)
    return _weighted(cls, l1, gl, w)


# -------------------------------------------------------------------- total
def total_loss(out, gts, loss_weights: LossWeights = LossWeights(),
               match_weights: LossWeights | None = None, dn: DenoiseBatch | None = None,
               aux_outputs: list | None = None) -> LossBreakdown:
    """Weighted sum of final, per-layer auxiliary, encoder and dn losses.

    ``out`` is a :class:`~msdet.msattn.DetectionOutput`; ``gts`` one
    :class:`GroundTruth` per image. Matching is recomputed per layer.
    """
    w = loss_weights
    mw = match_weights or loss_weights
    n = out.num_queries
    if out.logits.shape[1] != n + out.num_dn:
        raise ContractError(f"output carries {out.logits.shape[1]} queries, expected {n + out.num_dn}")
    if len(gts) != out.logits.shape[0]:
        raise ContractError(f"{len(gts)} ground-truth sets for a batch of {out.logits.shape[0]}")
    if (dn is None) != (out.num_dn == 0):
        raise ContractError("dn queries and dn targets must be supplied together")
    layers = list(out.aux if aux_outputs is None else aux_outputs) + [(out.logits, out.boxes)]

    def split(pair):
        lg, bx = pair
        return (lg[:, :n], bx[:, :n]), (lg[:, n:], bx[:, n:])

    (fl, fb), (dl, db) = split(layers[-1])
    cls, l1, gl, matches = set_loss(fl, fb, gts, w, match_batch(fl, fb, gts, mw))
    aux = []
    dn_total = nc.Tensor(0.0)
    for pair in layers[:-1]:
        (al, ab), (adl, adb) = split(pair)
        c, a, g, _ = set_loss(al, ab, gts, w, match_batch(al, ab, gts, mw))
        aux.append(_weighted(c, a, g, w))
        if dn is not None:
            dn_total = dn_total + dn_loss(adl, adb, dn, gts, w)
    if dn is not None:
        dn_total = dn_total + dn_loss(dl, db, dn, gts, w)
    el, eb = out.enc
    c, a, g, _ = set_loss(el, eb, gts, w, match_batch(el, eb, gts, mw))
    enc = _weighted(c, a, g, w)
    total = _weighted(cls, l1, gl, w) + dn_total + enc
    for a in aux:
        total = total + a
    return LossBreakdown(cls, l1, gl, dn_total, aux, enc, total, matches)


def fsum_total(bd: LossBreakdown, w: LossWeights = LossWeights()) -> float:
    """Recompute the total from the components (reference for tests)."""
    parts = [w.cls * bd.cls.item(), w.l1 * bd.l1.item(), w.giou * bd.giou.item(), bd.dn.item(),
             bd.enc.item()] + [a.item() for a in bd.aux]
    return math.fsum(parts)
