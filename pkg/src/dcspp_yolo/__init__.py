"""Single-shot object detector with a dense-connection backbone, a
stride-1 spatial-pyramid-pooling block, and a reorg passthrough head;
pure numpy, CPU only, trainable from scratch at desk scale."""

from .anchors import AnchorSet, iou_dist, kmeans_anchors
from .detection import BBox, Detection, decode, detect_image, iou, nms
from .evaluation import average_precision, evaluate, match_detections
from .loss import LossWeights, TruthBox, assign_targets, compute_loss, decode_predictions
from .network import NetworkConfig, NetworkGraph, build_network
from .tensor import Tensor
from .training import TrainConfig, adam_step, augment, lr_at, synth_dataset, train

__version__ = "0.1.0"

__all__ = [
    "AnchorSet",
    "BBox",
    "Detection",
    "LossWeights",
    "NetworkConfig",
    "NetworkGraph",
    "Tensor",
    "TrainConfig",
    "TruthBox",
    "adam_step",
    "assign_targets",
    "augment",
    "average_precision",
    "build_network",
    "compute_loss",
    "decode",
    "decode_predictions",
    "detect_image",
    "evaluate",
    "iou",
    "iou_dist",
    "kmeans_anchors",
    "lr_at",
    "match_detections",
    "nms",
    "synth_dataset",
    "train",
]
