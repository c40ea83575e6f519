from .boxes import Box, box_iou, cxcywh_to_xyxy, giou, pairwise_giou, pairwise_iou, xyxy_to_cxcywh
from .metrics import HoiAnnotation, MapResult, average_precision, compute_map
from .nms import TripletPrediction, ranking_order, triplet_nms
from .splits import SplitSpec, construct_split, make_validation_split

__all__ = [
    "Box", "box_iou", "giou", "pairwise_iou", "pairwise_giou", "cxcywh_to_xyxy", "xyxy_to_cxcywh",
    "HoiAnnotation", "MapResult", "average_precision", "compute_map",
    "TripletPrediction", "ranking_order", "triplet_nms",
    "SplitSpec", "construct_split", "make_validation_split",
]
