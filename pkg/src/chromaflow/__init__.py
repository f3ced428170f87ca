"""Chroma-shift adversarial attacks: YUV-space flow fields on U/V with Y held fixed.

Everything (autodiff, CNN, warping, attacks) is implemented on top of numpy.
"""
from .attacks import AttackConfig, AttackResult, apply_chroma_flow, attack_batch
from .classifier import ClassifierWeights, TrainConfig, forward, load_weights, predict, save_weights, train
from .color import YuvImage, colorfulness, gamut_project, rgb_to_yuv, to_grayscale, yuv_to_rgb
from .data import LabeledImage, filter_colorful, load_cifar10_bin, load_image_dir, read_image, write_image
from .errors import AccumulationError, ChromaflowError, ConfigError, DataError, FormatError, IoError, ShapeError
from .warp import FlowField, load_flow, save_flow, warp_bilinear

__version__ = "0.1.0"

__all__ = [
    "AccumulationError", "AttackConfig", "AttackResult", "ChromaflowError", "ClassifierWeights", "ConfigError",
    "DataError", "FlowField", "FormatError", "IoError", "LabeledImage", "ShapeError", "TrainConfig", "YuvImage",
    "apply_chroma_flow", "attack_batch", "colorfulness", "filter_colorful", "forward", "gamut_project",
    "load_cifar10_bin", "load_flow", "load_image_dir", "load_weights", "predict", "read_image", "rgb_to_yuv",
    "save_flow", "save_weights", "to_grayscale", "train", "warp_bilinear", "write_image", "yuv_to_rgb",
]
