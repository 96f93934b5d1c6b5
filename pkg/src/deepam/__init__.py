"""Deep analysis dictionary models for single-image super-resolution.

A model is a cascade of analysis dictionaries with per-atom soft
thresholds, closed by one synthesis dictionary. Layers are trained
greedily on LR/HR patch pairs; the whole cascade converts exactly into
a feed-forward rectifier network.
"""

from .errors import ConfigError, DataError, ModelFormatError, NumericalError
from .manifold_opt import (GoalPlusConfig, ObjectiveSpec, OptimizeResult,
                           SubspaceBasis, optimize, soft_threshold)
from .model import (AnalysisLayer, DeepAMModel, ReluNetwork, TrainConfig,
                    TrainingReport, atom_correlation_diagnostic,
                    dictionary_mosaic, forward, load, relu_forward,
                    relu_network_from_container, rescale_for_noise, save,
                    to_relu_container, to_relu_network, train)
from .patch_pipeline import (PatchDataset, PatchGeometry, extract_pairs,
                             load_image, load_luminance, modcrop, psnr,
                             reconstruct, resize_bicubic, save_png)

__version__ = "0.1.0"

__all__ = [
    "AnalysisLayer", "ConfigError", "DataError", "DeepAMModel",
    "GoalPlusConfig", "ModelFormatError", "NumericalError", "ObjectiveSpec",
    "OptimizeResult", "PatchDataset", "PatchGeometry", "ReluNetwork",
    "SubspaceBasis", "TrainConfig", "TrainingReport",
    "atom_correlation_diagnostic", "dictionary_mosaic", "extract_pairs",
    "forward", "load", "load_image", "load_luminance", "modcrop", "optimize",
    "psnr", "reconstruct", "relu_forward", "relu_network_from_container",
    "rescale_for_noise", "resize_bicubic", "save", "save_png",
    "soft_threshold", "to_relu_container", "to_relu_network", "train",
]
