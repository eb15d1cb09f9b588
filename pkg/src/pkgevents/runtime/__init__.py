"""Deployment side: binary model format, Huffman codec, integer engine, energy model."""

from .energy import EnergyProfile, estimate_inference_energy, estimate_wake_budget
from .engine import IntegerEngine, measured_latency, quantized_forward
from .huffman import EncodedModel, huffman_decode, huffman_encode
from .serialize import deserialize, serialize

__all__ = [
    "EncodedModel", "EnergyProfile", "IntegerEngine", "deserialize", "estimate_inference_energy",
    "estimate_wake_budget", "huffman_decode", "huffman_encode", "measured_latency",
    "quantized_forward", "serialize",
]
