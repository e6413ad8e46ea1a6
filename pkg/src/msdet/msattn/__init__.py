"""Multispectral detection transformer: backbone, query selection, decoder and head."""
from .layers import (
    FlatTokens,
    anchor_refine,
    base_anchors,
    competitive_query_selection,
    decoder_layer_forward,
    detection_head_forward,
    flatten_and_tag,
    linear,
    mlp2,
    ms_deformable_attention,
    phi_scale,
    position_embed,
    psi_constrain,
    self_attention,
    topk_indices,
    toy_backbone_forward,
)
from .model import DetectionOutput, DetectorNet, ModelConfig, init_params, prepare_images, view

__all__ = [
    "DetectionOutput", "DetectorNet", "FlatTokens", "ModelConfig", "anchor_refine", "base_anchors",
    "competitive_query_selection", "decoder_layer_forward", "detection_head_forward",
    "flatten_and_tag", "init_params", "linear", "mlp2", "ms_deformable_attention", "phi_scale",
    "position_embed", "prepare_images", "psi_constrain", "self_attention", "topk_indices",
    "toy_backbone_forward", "view",
]
