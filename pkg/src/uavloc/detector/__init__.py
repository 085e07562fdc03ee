"""Desk-scale pillar detector: layers, anchors, network, training, inference."""

from .anchors import assign_targets, decode_boxes, encode_boxes, make_anchors
from .estimator import PillarDetector, decode_detections, detect
from .network import DESK_NETWORK, NetworkConfig, PillarNet
from .nms import nms
from .train import DESK_TRAINING, TrainConfig, TrainingDivergedError, train
from .weights import WeightsFormatError, dump_weights, load_weights

__all__ = [
    "assign_targets",
    "decode_boxes",
    "encode_boxes",
    "make_anchors",
    "PillarDetector",
    "decode_detections",
    "detect",
    "DESK_NETWORK",
    "NetworkConfig",
    "PillarNet",
    "nms",
    "DESK_TRAINING",
    "TrainConfig",
    "TrainingDivergedError",
    "train",
    "WeightsFormatError",
    "dump_weights",
    "load_weights",
]
