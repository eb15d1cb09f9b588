"""Accelerometer event classification for package monitoring.

Synthetic data, oversampling, a numpy 1D-CNN, threshold-gated rejection,
pruning/quantization, and an integer-only runtime with an energy model.
"""

CLASSES = ("Forklift", "Truck", "Dummy")
TARGET_CLASSES = ("Forklift", "Truck")
DUMMY = 2
N_AXES = 3

__version__ = "0.1.0"
