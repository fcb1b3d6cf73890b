from .boxes import BoxList, decode_boxes, encode_boxes, iou_matrix, iou_numpy
from .model import (
    STRIDES,
    ConvBackbone,
    DetectorConfig,
    DetectorState,
    HeadOutputs,
    TwoStageDetector,
    detection_loss,
    generate_proposals,
    make_anchors,
    map_roi_levels,
    pool_roi_features,
    roi_head_forward,
)

__all__ = [
    "BoxList", "decode_boxes", "encode_boxes", "iou_matrix", "iou_numpy",
    "STRIDES", "ConvBackbone", "DetectorConfig", "DetectorState", "HeadOutputs", "TwoStageDetector",
    "detection_loss", "generate_proposals", "make_anchors", "map_roi_levels", "pool_roi_features",
    "roi_head_forward",
]
