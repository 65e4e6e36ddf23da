"""Pixel-processor-array emulator, binarized localisation CNN and
hardware-in-the-loop tracking simulator."""

from .bnn import BnnModel, PredictionDistribution, agreement, infer_ppa, infer_reference, load_model, save_model
from .ppa import AnalogPlane, BitPlane, NoiseModel

__all__ = [
    "AnalogPlane",
    "BitPlane",
    "BnnModel",
    "NoiseModel",
    "PredictionDistribution",
    "agreement",
    "infer_ppa",
    "infer_reference",
    "load_model",
    "save_model",
]

__version__ = "0.1.0"
