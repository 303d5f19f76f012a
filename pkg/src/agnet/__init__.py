"""Keypoint-driven semantic-region attention network.

Pipeline: salient keypoints -> Gaussian-mixture clustering -> semantic-region
boxes -> shared-feature attention network -> learnable pooled classifier,
with end-to-end gradient training and a train/eval/inspect/visualize CLI.
"""

from .clustering import ClusterAssignment, GmmConfig, GmmModel, fit_gmm, kmeans_init
from .errors import (
    AgnetError,
    CheckpointError,
    ConfigError,
    DatasetError,
    ImageError,
    NumericsError,
    ShapeError,
    TooFewPointsError,
)
from .keypoints import DetectorConfig, GrayImage, Keypoint, detect_keypoints
from .network import AgNetParams, forward, init_params
from .regions import BoundingBox, RegionSet, build_region_set, cluster_feature_map
from .tensor import GradTape, Tensor
from .training import EvalReport, LabeledImage, TrainConfig, evaluate, train

__all__ = [
    "AgnetError",
    "AgNetParams",
    "BoundingBox",
    "CheckpointError",
    "ClusterAssignment",
    "ConfigError",
    "DatasetError",
    "DetectorConfig",
    "EvalReport",
    "GmmConfig",
    "GmmModel",
    "GradTape",
    "GrayImage",
    "ImageError",
    "Keypoint",
    "LabeledImage",
    "NumericsError",
    "RegionSet",
    "ShapeError",
    "Tensor",
    "TooFewPointsError",
    "TrainConfig",
    "build_region_set",
    "cluster_feature_map",
    "detect_keypoints",
    "evaluate",
    "fit_gmm",
    "forward",
    "init_params",
    "kmeans_init",
    "train",
]

__version__ = "0.1.0"
