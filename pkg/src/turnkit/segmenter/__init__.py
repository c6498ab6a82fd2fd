"""Primary-speaker segmentation: causal encoder, embedding peeling, online
clustering of the primary centroid, and the segmentation training losses."""

from .encoder import CausalConv1d, MsccBlock, MsccConfig, MsccEncoder, mscc_forward
from .peeling import PeelConfig, PeelOutputs, SegmenterModel, peel_forward, soft_quant
from .clustering import (
    ClusterConfig,
    PrimaryTrack,
    cluster_step,
    select_primary_peel,
    write_decisions_csv,
)
from .losses import (
    CosFaceLoss,
    js_consistency_loss,
    peel_diversity_loss,
    pit_bce_loss,
    supcon_loss,
    triplet_consistency_loss,
)

__all__ = [
    "CausalConv1d", "MsccBlock", "MsccConfig", "MsccEncoder", "mscc_forward",
    "PeelConfig", "PeelOutputs", "SegmenterModel", "peel_forward", "soft_quant",
    "ClusterConfig", "PrimaryTrack", "cluster_step", "select_primary_peel",
    "write_decisions_csv",
    "CosFaceLoss", "js_consistency_loss", "peel_diversity_loss", "pit_bce_loss",
    "supcon_loss", "triplet_consistency_loss",
]
