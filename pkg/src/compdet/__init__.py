"""Occlusion-robust compositional object detection.

Generative vMF mixture models over unit-norm feature maps, a per-position
occluder switch, omega-controlled context/object decomposition, a scanning
detection layer and corner-voting bounding-box estimation, plus a synthetic
occlusion benchmark and evaluation harness.
"""

from .boxes import BoundingBox
from .container import ModelContainer, load_container, save_container
from .context import ContextAssignment, ContextDictionary
from .detection import Detection, LikelihoodMap, detect
from .features import BackboneParams, FeatureMap, extract_features, normalize_features
from .model import CompositionalModel, OccluderModel, OcclusionMap
from .training import TrainConfig, train
from .vmf import VmfDictionary, learn_dictionary

__all__ = [
    "BoundingBox", "ModelContainer", "load_container", "save_container",
    "ContextAssignment", "ContextDictionary", "Detection", "LikelihoodMap",
    "detect", "BackboneParams", "FeatureMap", "extract_features",
    "normalize_features", "CompositionalModel", "OccluderModel", "OcclusionMap",
    "TrainConfig", "train", "VmfDictionary", "learn_dictionary",
]

__version__ = "0.1.0"
