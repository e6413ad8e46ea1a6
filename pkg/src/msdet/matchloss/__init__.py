"""Bipartite matching, box geometry and detection losses."""
from .geometry import box_iou_np, giou, giou_np, iou, to_corners
from .hungarian import MatchResult, hungarian_match
from .losses import (
    DenoiseBatch,
    DenoiseGroup,
    GroundTruth,
    LossBreakdown,
    LossWeights,
    build_denoise_batch,
    build_denoise_groups,
    dn_loss,
    dn_mask,
    fsum_total,
    match_batch,
    match_cost,
    set_loss,
    vfl_set,
    total_loss,
    vfl_loss,
)

__all__ = [
    "DenoiseBatch", "DenoiseGroup", "GroundTruth", "LossBreakdown", "LossWeights", "MatchResult",
    "box_iou_np", "build_denoise_batch", "build_denoise_groups", "dn_loss", "dn_mask", "fsum_total",
    "giou", "giou_np", "hungarian_match", "iou", "match_batch", "match_cost", "set_loss", "to_corners",
    "total_loss", "vfl_loss", "vfl_set",
]
