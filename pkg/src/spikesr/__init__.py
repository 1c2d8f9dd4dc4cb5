"""Spiking super-resolution network with attention, trainable on CPU."""
from .model import ComplexityReport, ModelConfig, SpikeSR, build_model, build_variant, count_flops, count_params, preset
from .neuron import LIF, LifParams, relaxed

__all__ = [
    "ComplexityReport",
    "LIF",
    "LifParams",
    "ModelConfig",
    "SpikeSR",
    "build_model",
    "build_variant",
    "count_flops",
    "count_params",
    "preset",
    "relaxed",
]
__version__ = "0.1.0"
