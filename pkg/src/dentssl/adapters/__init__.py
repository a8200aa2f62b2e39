"""Downstream adaptation suite over a frozen backbone."""

from .probe import ProbeGrid, ProbeResult, image_embedding, linear_probe
from .seg_heads import LinearSegHead2D, UNETRHead3D, tokens_to_map, unetr_layer_taps
from .vit_adapter import (
    CrossAttention,
    Extractor,
    FeaturePyramid,
    Injector,
    SpatialPriorModule,
    ViTAdapter,
    spm_token_count,
)
from .finetune import (
    ADAPTER_LR_GRID,
    ADAPTER_LAYER_OPTIONS,
    ClassifierFit,
    SegmentationFit,
    finetune_adapter_classifier,
    finetune_segmentation,
    make_seg_head,
)

__all__ = [
    "ProbeGrid",
    "ProbeResult",
    "image_embedding",
    "linear_probe",
    "LinearSegHead2D",
    "UNETRHead3D",
    "tokens_to_map",
    "unetr_layer_taps",
    "CrossAttention",
    "Extractor",
    "FeaturePyramid",
    "Injector",
    "SpatialPriorModule",
    "ViTAdapter",
    "spm_token_count",
    "ADAPTER_LR_GRID",
    "ADAPTER_LAYER_OPTIONS",
    "ClassifierFit",
    "SegmentationFit",
    "finetune_adapter_classifier",
    "finetune_segmentation",
    "make_seg_head",
]
