"""Class-specific subnetworks of a small CNN: gate extraction, explanation and detection."""

__version__ = "0.1.0"

from .data import ShapesConfig, generate_shapes
from .extract import ExtractionConfig, SubnetworkBundle, extract_subnetwork, subnet_forward
from .model import GateVector, ModelSpec, build_reference_cnn, forward, load_model, save_model, train_base

__all__ = [
    "ExtractionConfig",
    "GateVector",
    "ModelSpec",
    "ShapesConfig",
    "SubnetworkBundle",
    "build_reference_cnn",
    "extract_subnetwork",
    "forward",
    "generate_shapes",
    "load_model",
    "save_model",
    "subnet_forward",
    "train_base",
]
