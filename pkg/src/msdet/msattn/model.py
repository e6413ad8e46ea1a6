"""Configuration, parameter layout and the end-to-end detector forward pass."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .. import numcore as nc
from ..errors import ConfigError, ContractError, DimensionError
from . import layers as L

MODALITY_INDEX = {"visible": 0, "infrared": 1}


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the detector (desk-scale defaults)."""

    channels: int = 32
    heads: int = 2
    points: int = 4
    levels: int = 3
    layers: int = 3
    queries: int = 60
    num_classes: int = 4
    ffn_dim: int = 64
    stem_patch: int = 8
    base_anchor: float = 0.05
    modalities: tuple = ("visible", "infrared")
    mcqs: bool = True
    mdca: bool = True
    cqs: bool = True

    def validate(self) -> "ModelConfig":
        for name in ("channels", "heads", "points", "levels", "layers", "queries", "num_classes",
                     "ffn_dim", "stem_patch"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.channels % self.heads:
            raise ConfigError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        mods = tuple(self.modalities)
        if not mods or len(set(mods)) != len(mods) or any(m not in MODALITY_INDEX for m in mods):
            raise ConfigError(f"modalities must be a non-empty subset of {tuple(MODALITY_INDEX)}, got {mods}")
        if not 0.0 < self.base_anchor * 2 ** (self.levels - 1) < 1.0:
            raise ConfigError("base anchor size must stay inside (0, 1) on every level")
        return self

    @property
    def fused(self) -> bool:
        """True when both modalities are present but selection reads summed tokens."""
        return len(self.modalities) == 2 and not self.mcqs

    @property
    def attended_modalities(self) -> int:
        return len(self.modalities) if (self.mdca or len(self.modalities) == 1) else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = ",".join(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "modalities":
                v = tuple(x for x in (v.split(",") if isinstance(v, str) else v) if x)
            elif isinstance(f.default, bool):
                v = v if isinstance(v, bool) else str(v).strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(f.default, int):
                v = int(v)
            elif isinstance(f.default, float):
                v = float(v)
            kw[f.name] = v
        return cls(**kw).validate()


@dataclass
class DetectionOutput:
    """Model outputs for a batch.

    ``logits``/``boxes`` are the final head outputs ``[B, N + n_dn, ...]``;
    ``aux`` holds ``(logits, boxes)`` for decoder layers ``1..D-1``;
    ``enc`` the encoder proposals of the selected tokens; ``records`` one
    sampling record per decoder layer.
    """

    logits: nc.Tensor
    boxes: nc.Tensor
    aux: list
    enc: tuple
    selection: dict
    records: list
    anchors: list
    num_queries: int
    num_dn: int = 0

    @property
    def probs(self) -> np.ndarray:
        return nc.sigmoid(self.logits.data).data

    def matching_part(self):
        """Final (logits, boxes) restricted to the matching queries."""
        n = self.num_queries
        return self.logits[:, :n], self.boxes[:, :n]


def _glorot(rng, fan_in, fan_out, shape=None):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> nc.ParameterSet:
    """Create all parameters for ``cfg`` from a seeded generator."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    ps = nc.ParameterSet()
    C, Hh, K, Lv = cfg.channels, cfg.heads, cfg.points, cfg.levels
    M = cfg.attended_modalities
    for mod in cfg.modalities:
        cin = 3 if mod == "visible" else 1
        n_in = cfg.stem_patch ** 2 * cin
        for lv in range(Lv):
            ps.add(f"bb.{mod}.l{lv}.w", _glorot(rng, n_in, C))
            ps.add(f"bb.{mod}.l{lv}.b", np.zeros(C))
            ps.add(f"bb.{mod}.l{lv}.mix.w", _glorot(rng, C, C))
            ps.add(f"bb.{mod}.l{lv}.mix.b", np.zeros(C))
            n_in = 4 * C
    prior = -np.log((1 - 0.01) / 0.01)
    ps.add("sel.w", _glorot(rng, C, cfg.num_classes))
    ps.add("sel.b", np.full(cfg.num_classes, prior))
    _mlp(ps, rng, "prop.", C, C, 4, zero_last=True)
    if not cfg.cqs:
        ps.add("content.embed", rng.normal(0.0, 1.0, size=(cfg.queries, C)))
    _mlp(ps, rng, "pos.", 4, C, C)
    ps.add("dn.label_embed", rng.normal(0.0, 1.0, size=(cfg.num_classes, C)))

    # offset directions: one ring of points per head, half-way to the box edge
    ang = 2 * np.pi * np.arange(Hh * K).reshape(Hh, K) / (Hh * K)
    ring = np.arctanh(0.5 * np.stack([np.cos(ang), np.sin(ang)], axis=-1))      # [H,K,2]
    off_bias = np.broadcast_to(ring[None, :, None], (M, Hh, Lv, K, 2)).reshape(-1)
    for d in range(cfg.layers):
        p = f"dec{d}."
        for nm in ("q", "k", "v", "o"):
            ps.add(f"{p}sa.w{nm}", _glorot(rng, C, C))
            ps.add(f"{p}sa.b{nm}", np.zeros(C))
        ps.add(p + "ca.w_off", np.zeros((C, M * Hh * Lv * K * 2)))
        ps.add(p + "ca.b_off", off_bias.copy())
        ps.add(p + "ca.w_att", np.zeros((C, Hh * M * Lv * K)))
        ps.add(p + "ca.b_att", np.zeros(Hh * M * Lv * K))
        ps.add(p + "ca.w_val", _glorot(rng, C, C))
        ps.add(p + "ca.w_out", _glorot(rng, C, C))
        for i in (1, 2, 3):
            ps.add(f"{p}ln{i}.g", np.ones(C))
            ps.add(f"{p}ln{i}.b", np.zeros(C))
        _mlp(ps, rng, p + "ffn.", C, cfg.ffn_dim, C)
        _mlp(ps, rng, p + "box.", C, C, 4, zero_last=True)
    ps.add("head.cls.w", _glorot(rng, C, cfg.num_classes))
    ps.add("head.cls.b", np.full(cfg.num_classes, prior))
    _mlp(ps, rng, "head.box.", C, C, 4, zero_last=True)
    return ps


def _mlp(ps, rng, prefix, n_in, n_hidden, n_out, zero_last=False):
    ps.add(prefix + "w1", _glorot(rng, n_in, n_hidden))
    ps.add(prefix + "b1", np.zeros(n_hidden))
    ps.add(prefix + "w2", np.zeros((n_hidden, n_out)) if zero_last else _glorot(rng, n_hidden, n_out))
    ps.add(prefix + "b2", np.zeros(n_out))


def view(ps: nc.ParameterSet, prefix: str) -> dict:
    """Parameters under ``prefix`` keyed by the remainder of their name."""
    n = len(prefix)
    return {k[n:]: ps[k] for k in ps.names() if k.startswith(prefix)}


def _layer_view(ps, d):
    base = view(ps, f"dec{d}.")
    out = {k: v for k, v in base.items() if k.startswith("ln")}
    for sub in ("sa", "ca", "ffn", "box"):
        out[sub] = {k[len(sub) + 1:]: v for k, v in base.items() if k.startswith(sub + ".")}
    return out


def prepare_images(visible, infrared):
    """uint8 or float images -> float arrays in ``[-0.5, 0.5]`` with a batch axis."""
    vis = np.asarray(visible)
    ir = np.asarray(infrared)
    if vis.ndim == 3:
        vis = vis[None]
    if ir.ndim == 2:
        ir = ir[None]
    if ir.ndim == 3:
        ir = ir[..., None]
    if vis.ndim != 4 or vis.shape[-1] != 3:
        raise DimensionError(f"visible images must be [B,S,S,3], got {np.shape(visible)}")
    if ir.shape[:3] != vis.shape[:3]:
        raise DimensionError(f"image pair extents differ: {vis.shape[:3]} vs {ir.shape[:3]}")
    scale = 255.0 if vis.dtype == np.uint8 else 1.0
    return vis.astype(np.float64) / scale - 0.5, ir.astype(np.float64) / scale - 0.5


class DetectorNet:
    """Detector bound to a config and a parameter set."""

    def __init__(self, cfg: ModelConfig, params: nc.ParameterSet | None = None, seed: int = 0):
        self.cfg = cfg.validate()
        self.params = params if params is not None else init_params(cfg, seed)

    # -- stages ----------------------------------------------------------------
    def pyramids(self, vis, ir) -> dict:
        cfg = self.cfg
        imgs = {"visible": vis, "infrared": ir}
        return {MODALITY_INDEX[m]: L.toy_backbone_forward(imgs[m], view(self.params, f"bb.{m}."),
                                                          cfg.levels, cfg.stem_patch)
                for m in cfg.modalities}

    def tokens(self, pyr: dict) -> L.FlatTokens:
        if self.cfg.fused:
            return L.flatten_and_tag({-1: [a + b for a, b in zip(pyr[0], pyr[1])]})
        return L.flatten_and_tag(pyr)

    def value_maps(self, pyr: dict) -> list:
        if len(pyr) == 2 and not self.cfg.mdca:
            return [[a + b for a, b in zip(pyr[0], pyr[1])]]
        return [pyr[m] for m in sorted(pyr)]

    # -- forward ---------------------------------------------------------------
    def forward(self, visible, infrared, dn_labels=None, dn_boxes=None, attn_mask=None,
                record: bool = False) -> DetectionOutput:
        """Run the detector on a batch of image pairs.

        ``dn_labels`` ``[B, G]`` and ``dn_boxes`` ``[B, G, 4]`` append
        denoising queries after the selected ones; ``attn_mask`` is the
        matching bool mask over all ``N + G`` queries (True = blocked).
        """
        cfg, ps = self.cfg, self.params
        vis, ir = prepare_images(visible, infrared)
        B = vis.shape[0]
        pyr = self.pyramids(vis, ir)
        seq = self.tokens(pyr)
        maps = self.value_maps(pyr)
        sel = L.competitive_query_selection(seq, view(ps, "sel."), view(ps, "prop."), cfg.queries,
                                            cfg.base_anchor)
        if cfg.cqs:
            z = sel["content"]
        else:
            z = nc.reshape(ps["content.embed"], (1, cfg.queries, cfg.channels)) + np.zeros((B, 1, 1))
        anchor = sel["boxes"].detach()
        n_dn = 0
        if dn_labels is not None:
            dn_labels = np.asarray(dn_labels, dtype=np.int64)
            dn_boxes = np.asarray(dn_boxes, dtype=np.float64)
            n_dn = dn_labels.shape[1]
            if dn_boxes.shape != (B, n_dn, 4):
                raise DimensionError(f"dn boxes {dn_boxes.shape} do not match labels {dn_labels.shape}")
            if n_dn:
                dz = ps["dn.label_embed"][dn_labels]
                z = nc.concat([z, dz], axis=1)
                anchor = nc.concat([anchor, nc.Tensor(dn_boxes)], axis=1)
        total = cfg.queries + n_dn
        if attn_mask is not None and np.asarray(attn_mask).shape[-2:] != (total, total):
            raise DimensionError(f"attention mask {np.asarray(attn_mask).shape} does not cover {total} queries")

        pos_mlp = view(ps, "pos.")
        head = view(ps, "head.")
        head = {"cls.w": head["cls.w"], "cls.b": head["cls.b"],
                "box": {k[4:]: v for k, v in head.items() if k.startswith("box.")}}
        aux, records, anchors = [], [], [anchor.data.copy()]
        logits = boxes = None
        for d in range(cfg.layers):
            rec = {} if record else None
            lp = _layer_view(ps, d)
            z = L.decoder_layer_forward(z, anchor, maps, lp, pos_mlp, cfg.heads, cfg.points,
                                        attn_mask, rec)
            new_anchor = L.anchor_refine(z, anchor, lp["box"])
            if d < cfg.layers - 1:
                aux.append((L.linear(z, head["cls.w"], head["cls.b"]), new_anchor))
            else:
                logits, boxes = L.detection_head_forward(z, new_anchor, head)
            records.append(rec)
            anchors.append(new_anchor.data.copy())
            anchor = new_anchor.detach()
        return DetectionOutput(
            logits=logits, boxes=boxes, aux=aux, enc=(sel["logits"], sel["boxes"]),
            selection={"index": sel["index"], "modality": sel["modality"], "score": sel["score"],
                       "level": seq.level[sel["index"]], "base": sel["base"]},
            records=records, anchors=anchors, num_queries=cfg.queries, num_dn=n_dn)

    __call__ = forward
