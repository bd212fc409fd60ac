"""Figure-skating Lutz edge-error judgment from 3D pose and skate-angle series."""

__version__ = "0.1.0"

from .classifier import EdgeLogisticRegression, load_model, save_model
from .evaluation import feature_importance, loso_cv, trajectory_distance
from .ingest import Dataset, JumpSample, PoseSequence, SkateAngleSequence, load_dataset
from .preprocess import FeatureBuilder, FeatureConfig, build_features, downsample, normalize_pose

__all__ = [
    "Dataset",
    "EdgeLogisticRegression",
    "FeatureBuilder",
    "FeatureConfig",
    "JumpSample",
    "PoseSequence",
    "SkateAngleSequence",
    "build_features",
    "downsample",
    "feature_importance",
    "load_dataset",
    "load_model",
    "loso_cv",
    "normalize_pose",
    "save_model",
    "trajectory_distance",
]
