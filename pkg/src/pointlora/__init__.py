"""PointLoRA: low-rank adaptation with multi-scale token selection for point cloud transformers."""

from .config import ModelConfig, RunConfig, load_config
from .model import PointClassifier, audit_parameters, build_model, merge_adapters

__version__ = "0.1.0"

__all__ = ["ModelConfig", "RunConfig", "load_config", "PointClassifier", "audit_parameters",
           "build_model", "merge_adapters"]
