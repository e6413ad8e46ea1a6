"""Functional building blocks of the multispectral decoder.

Parameters are passed as plain dicts of :class:`~msdet.numcore.Parameter`
(or Tensors); all functions are batched over a leading image axis ``B``.
"""
from __future__ import annotations

import numpy as np

from .. import numcore as nc
from ..errors import ContractError, DimensionError

MODALITIES = ("visible", "infrared")


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of an arbitrary-rank ``x``."""
    lead = x.shape[:-1]
    y = nc.reshape(x, (-1, x.shape[-1])) @ w
    if b is not None:
        y = y + b
    return nc.reshape(y, lead + (w.shape[-1],))


def mlp2(x, p, prefix=""):
    """Two linear projections with a ReLU between them."""
    h = nc.relu(linear(x, p[prefix + "w1"], p[prefix + "b1"]))
    return linear(h, p[prefix + "w2"], p[prefix + "b2"])


# ---------------------------------------------------------------- backbone
def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """``[B, S, S, c]`` -> ``[B, S/patch, S/patch, patch*patch*c]``."""
    B, H, W, c = img.shape
    x = img.reshape(B, H // patch, patch, W // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, H // patch, W // patch, patch * patch * c)


def _merge2x2(x):
    B, H, W, C = x.shape
    x = nc.reshape(x, (B, H // 2, 2, W // 2, 2, C))
    x = nc.transpose(x, (0, 1, 3, 2, 4, 5))
    return nc.reshape(x, (B, H // 2, W // 2, 4 * C))


def toy_backbone_forward(image, p, levels: int = 3, stem_patch: int = 8):
    """Per-modality feature pyramid from strided patch projections.

    ``image`` is ``[B, S, S, c]`` floats. Level 0 projects ``stem_patch``
    squared patches, each further level merges 2x2 cells of the previous
    one; every projection is followed by tanh and a pointwise linear + tanh.
    Returns a list of ``levels`` tensors ``[B, S/(stem*2^l), ..., C]``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[..., None]
    B, H, W, _ = image.shape
    need = stem_patch * 2 ** (levels - 1)
    if H % need or W % need:
        raise DimensionError(f"image extents {H}x{W} must be divisible by {need}")
    x = nc.Tensor(patchify(image, stem_patch))
    out = []
    for lvl in range(levels):
        if lvl > 0:
            x = _merge2x2(x)
        x = nc.tanh(linear(x, p[f"l{lvl}.w"], p[f"l{lvl}.b"]))
        x = nc.tanh(linear(x, p[f"l{lvl}.mix.w"], p[f"l{lvl}.mix.b"]))
        out.append(x)
    return out


# ---------------------------------------------------------------- flatten
class FlatTokens:
    """Flattened tokens ``[B, T, C]`` plus per-token provenance.

    ``modality``, ``level``, ``row``, ``col`` are int arrays of length T
    (modality -1 marks fused tokens); ``center`` is ``[T, 2]`` normalized
    grid centers and ``base_size`` the per-token base anchor extent.
    """

    def __init__(self, tokens, modality, level, row, col, shapes):
        self.tokens = tokens
        self.modality = np.asarray(modality)
        self.level = np.asarray(level)
        self.row = np.asarray(row)
        self.col = np.asarray(col)
        self.shapes = list(shapes)  # (H_l, W_l) per level
        Hs = np.array([self.shapes[lv][0] for lv in self.level])
        Ws = np.array([self.shapes[lv][1] for lv in self.level])
        self.center = np.stack([(self.col + 0.5) / Ws, (self.row + 0.5) / Hs], axis=-1)

    def __len__(self):
        return len(self.level)

    def index_of(self, modality, level, row, col) -> int:
        hits = np.nonzero((self.modality == modality) & (self.level == level)
                          & (self.row == row) & (self.col == col))[0]
        if len(hits) != 1:
            raise KeyError((modality, level, row, col))
        return int(hits[0])


def flatten_and_tag(pyramids: dict) -> FlatTokens:
    """Concatenate pyramids (visible first) into one token sequence.

    ``pyramids`` maps modality id (0 visible, 1 infrared, -1 fused) to a
    list of level tensors ``[B, H_l, W_l, C]``.
    """
    order = sorted(pyramids, key=lambda m: (m < 0, m))
    ref = pyramids[order[0]]
    C = ref[0].shape[-1]
    shapes = [lv.shape[1:3] for lv in ref]
    parts, mods, lvls, rows, cols = [], [], [], [], []
    for m in order:
        pyr = pyramids[m]
        if len(pyr) != len(ref):
            raise DimensionError(f"level count mismatch: {len(pyr)} vs {len(ref)}")
        for lv, x in enumerate(pyr):
            if x.shape[-1] != C:
                raise DimensionError(f"channel mismatch: {x.shape[-1]} vs {C}")
            B, H, W, _ = x.shape
            parts.append(nc.reshape(x, (B, H * W, C)))
            rr, cc = np.divmod(np.arange(H * W), W)
            mods.append(np.full(H * W, m))
            lvls.append(np.full(H * W, lv))
            rows.append(rr)
            cols.append(cc)
    tokens = nc.concat(parts, axis=1)
    return FlatTokens(tokens, np.concatenate(mods), np.concatenate(lvls),
                      np.concatenate(rows), np.concatenate(cols), shapes)


# --------------------------------------------------------- query selection
def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the ``k`` largest scores; ties go to the lower index."""
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def base_anchors(seq: FlatTokens, base: float = 0.05) -> np.ndarray:
    """``[T, 4]`` grid-center anchors with extent ``base * 2^level``."""
    size = base * (2.0 ** seq.level)
    return np.concatenate([seq.center, size[:, None], size[:, None]], axis=-1)


def competitive_query_selection(seq: FlatTokens, scoring: dict, proposal_head: dict, k_sel: int,
                                base: float = 0.05):
    """Score every token with one linear map and keep the Top-K.

    Returns a dict with ``index`` ``[B, K]``, ``content`` ``[B, K, C]``,
    ``logits`` ``[B, K, ncls]`` (encoder classification of the selected
    tokens), ``boxes`` ``[B, K, 4]`` proposals refined from the base anchors,
    ``modality`` ``[B, K]`` provenance and ``score`` ``[B, K]``.
    """
    T = len(seq)
    if k_sel > T:
        raise ContractError(f"cannot select {k_sel} queries from {T} tokens")
    logits_all = linear(seq.tokens, scoring["w"], scoring["b"])
    scores = logits_all.data.max(axis=-1)
    idx = topk_indices(scores, k_sel)
    B = idx.shape[0]
    bi = np.arange(B)[:, None]
    content = seq.tokens[bi, idx]
    logits = logits_all[bi, idx]
    anchors = base_anchors(seq, base)[idx]
    delta = mlp2(content, proposal_head)
    boxes = nc.refine_logit(nc.Tensor(anchors), delta)
    return {
        "index": idx,
        "content": content,
        "logits": logits,
        "boxes": boxes,
        "modality": seq.modality[idx],
        "score": np.take_along_axis(scores, idx, axis=-1),
        "base": anchors,
    }


# ------------------------------------------------------------- geometry
def position_embed(anchor, mlp: dict):
    """Map normalized ``(cx, cy, w, h)`` anchors to C-dim embeddings."""
    return mlp2(anchor, mlp)


def phi_scale(p_hat, shape):
    """Normalized points -> pixel coordinates on a level of extent ``(H, W)``."""
    H, W = shape
    scale = np.array([W, H], dtype=np.float64)
    return nc.as_tensor(p_hat) * scale - 0.5


def psi_constrain(raw, anchor, shape):
    """Bound raw offsets to the anchor's half extent, in level pixels."""
    H, W = shape
    half = nc.as_tensor(anchor)[..., 2:4] * (0.5 * np.array([W, H], dtype=np.float64))
    return nc.tanh(raw) * half


def anchor_refine(content, prev_anchor, mlp: dict):
    """``sigmoid(MLP(content) + inverse_sigmoid(prev_anchor))``."""
    return nc.refine_logit(prev_anchor, mlp2(content, mlp))


# -------------------------------------------------------------- attention
def ms_deformable_attention(query, anchor, value_maps, p: dict, heads: int, points: int,
                            record: dict | None = None):
    """Multispectral deformable cross-attention.

    ``query`` is ``[B, N, C]`` (content + position), ``anchor`` ``[B, N, 4]``
    and ``value_maps[m][l]`` the ``[B, H_l, W_l, C]`` feature maps of each
    attended modality. Offsets are predicted by column blocks of
    ``p["w_off"]`` laid out as (modality, head, level, point, xy); weights
    by ``p["w_att"]`` laid out as (head, modality, level, point) and
    softmax-normalized jointly over modality x level x point per head.
    The value map (``w_val``) is shared by all modalities; ``w_out`` holds
    the per-head output maps as row blocks.
    """
    B, N, C = query.shape
    M = len(value_maps)
    L = len(value_maps[0])
    Hh, K = heads, points
    Dh = C // Hh
    off = nc.reshape(linear(query, p["w_off"], p["b_off"]), (B, N, M, Hh, L, K, 2))
    att = nc.softmax(nc.reshape(linear(query, p["w_att"], p["b_att"]), (B, N, Hh, M * L * K)), axis=-1)
    center = anchor[..., 0:2]
    samples = []
    locs = np.zeros((B, N, M, Hh, L, K, 2)) if record is not None else None
    for m in range(M):
        for lv in range(L):
            fmap = value_maps[m][lv]
            _, Hl, Wl, _ = fmap.shape
            shape = (Hl, Wl)
            v = linear(fmap, p["w_val"])                                 # [B,Hl,Wl,C]
            v = nc.transpose(nc.reshape(v, (B, Hl, Wl, Hh, Dh)), (0, 3, 1, 2, 4))  # [B,H,Hl,Wl,Dh]
            ref = nc.reshape(phi_scale(center, shape), (B, N, 1, 1, 2))
            a4 = nc.reshape(anchor, (B, N, 1, 1, 4))
            loc = ref + psi_constrain(off[:, :, m, :, lv], a4, shape)  # [B,N,H,K,2]
            if record is not None:
                # same point in normalized units: center + tanh(raw) * half extent
                half = anchor.data[:, :, None, None, 2:4] / 2
                locs[:, :, m, :, lv] = center.data[:, :, None, None] + np.tanh(off.data[:, :, m, :, lv]) * half
            pts = nc.reshape(nc.transpose(loc, (0, 2, 1, 3, 4)), (B, Hh, N * K, 2))
            s = nc.bilinear_sample(v, pts)                                 # [B,H,N*K,Dh]
            samples.append(nc.reshape(s, (B, Hh, N, K, Dh)))
    S = nc.concat(samples, axis=3)                                         # [B,H,N,M*L*K,Dh]
    A = nc.reshape(nc.transpose(att, (0, 2, 1, 3)), (B, Hh, N, 1, M * L * K))
    agg = nc.reshape(A @ S, (B, Hh, N, Dh))
    agg = nc.reshape(nc.transpose(agg, (0, 2, 1, 3)), (B, N, C))
    out = linear(agg, p["w_out"])
    if record is not None:
        w = att.data.reshape(B, N, Hh, M, L, K)
        record["weights"] = np.transpose(w, (0, 3, 2, 4, 1, 5))            # [B,M,H,L,N,K]
        record["locations"] = np.transpose(locs, (0, 2, 3, 4, 1, 5, 6))    # [B,M,H,L,N,K,2]
        record["offsets"] = np.transpose(off.data, (0, 2, 3, 4, 1, 5, 6))
        record["anchor"] = np.array(anchor.data)
    return out


def self_attention(z, pos, p: dict, heads: int, mask=None):
    """Multi-head self-attention; ``pos`` is added to queries and keys.

    ``mask`` is a bool array ``[N, N]`` or ``[B, N, N]``, True = blocked.
    """
    B, N, C = z.shape
    Dh = C // heads
    qk_in = z + pos

    def split(t):
        return nc.transpose(nc.reshape(t, (B, N, heads, Dh)), (0, 2, 1, 3))

    q = split(linear(qk_in, p["wq"], p["bq"]))
    k = split(linear(qk_in, p["wk"], p["bk"]))
    v = split(linear(z, p["wv"], p["bv"]))
    logits = (q @ nc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(Dh))
    m = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (N, N):
            raise DimensionError(f"attention mask shape {mask.shape} does not match {N} queries")
        m = mask[:, None] if mask.ndim == 3 else mask[None, None]
    att = nc.softmax(logits, axis=-1, mask=m)
    out = nc.reshape(nc.transpose(att @ v, (0, 2, 1, 3)), (B, N, C))
    return linear(out, p["wo"], p["bo"])


def decoder_layer_forward(z, anchor, value_maps, p: dict, pos_mlp: dict, heads: int, points: int,
                          mask=None, record: dict | None = None):
    """Self-attention, multispectral cross-attention and FFN, each residual + LayerNorm."""
    pos = position_embed(anchor, pos_mlp)
    z = nc.layer_norm(z + self_attention(z, pos, p["sa"], heads, mask), p["ln1.g"], p["ln1.b"])
    ca = ms_deformable_attention(z + pos, anchor, value_maps, p["ca"], heads, points, record)
    z = nc.layer_norm(z + ca, p["ln2.g"], p["ln2.b"])
    ff = mlp2(z, p["ffn"])
    return nc.layer_norm(z + ff, p["ln3.g"], p["ln3.b"])


def detection_head_forward(z, anchor, head: dict):
    """Class logits and the head's own refinement of ``anchor``."""
    logits = linear(z, head["cls.w"], head["cls.b"])
    box = anchor_refine(z, anchor, head["box"])
    return logits, box
