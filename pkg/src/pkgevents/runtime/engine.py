"""Integer-only inference, emulating the microcontroller execution path.

Between input quantization and output dequantization every operation is on
integers: int8 operands, wide accumulators, and requantization by a
fixed-point multiplier (31-bit significand, rounding right shift).
"""

from __future__ import annotations

import math
import statistics
import time

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..compress import QConv1D, QDense, QGlobalAvgPool1D, QuantizedModel
from ..errors import ShapeError
from ..nnet import FloatModel, as_batch, forward, softmax

WARMUP_RUNS = 3


def quantize_multiplier(real: float) -> tuple[int, int]:
    """(significand, shift) with ``real ~= significand * 2**-shift`` and the
    significand in [2**30, 2**31)."""
    if not real > 0:
        raise ValueError(f"multiplier must be positive, got {real}")
    frac, exp = math.frexp(real)
    sig = int(round(frac * (1 << 31)))
    if sig == 1 << 31:
        sig //= 2
        exp += 1
    return sig, 31 - exp


def requantize(acc: np.ndarray, sig: int, shift: int) -> np.ndarray:
    """``round(acc * sig / 2**shift)``, ties away from zero, in int64."""
    prod = acc.astype(np.int64) * sig
    if shift <= 0:
        return prod << -shift
    if shift > 62:
        return np.zeros_like(prod)
    mag = (np.abs(prod) + (1 << (shift - 1))) >> shift
    return np.where(prod < 0, -mag, mag)


class IntegerEngine:
    """A loaded quantized model. Multipliers are precomputed here, once."""

    def __init__(self, qmodel: QuantizedModel):
        self.qmodel = qmodel
        self.steps = []
        params = qmodel.input_params
        channels, length = qmodel.in_channels, qmodel.input_length
        for i, layer in enumerate(qmodel.layers):
            out = layer.output_params
            if isinstance(layer, QConv1D):
                o, c, k = layer.weight.shape
                if c != channels:
                    raise ShapeError(f"layer {i}: expects {c} channels, got {channels}")
                length = (length + 2 * layer.padding - k) // layer.stride + 1
                real = params.scale * layer.weight_params.scale / out.scale
                wmat = layer.weight.reshape(o, -1).astype(np.int64).T
                self.steps.append(("conv", layer, params.zero_point, wmat, quantize_multiplier(real)))
                channels = o
            elif isinstance(layer, QGlobalAvgPool1D):
                real = params.scale / (length * out.scale)
                self.steps.append(("pool", layer, params.zero_point, None, quantize_multiplier(real)))
                length = None
            elif isinstance(layer, QDense):
                real = params.scale * layer.weight_params.scale / out.scale
                wmat = layer.weight.astype(np.int64).T
                self.steps.append(("dense", layer, params.zero_point, wmat, quantize_multiplier(real)))
                channels = layer.weight.shape[0]
            else:
                raise ShapeError(f"layer {i}: unsupported {type(layer).__name__}")
            params = out

    def quantize_input(self, windows) -> np.ndarray:
        x = as_batch(windows)
        m = self.qmodel
        if x.shape[1:] != (m.in_channels, m.input_length):
            raise ShapeError(f"layer 0: expected window ({m.input_length}, {m.in_channels}), "
                             f"got ({x.shape[2]}, {x.shape[1]})")
        return m.input_params.quantize(x)

    def run_int(self, q: np.ndarray) -> np.ndarray:
        """int8 input tensor (n, C, L) -> int8 logits (n, classes)."""
        x = q.astype(np.int64)
        for kind, layer, zp_in, wmat, (sig, shift) in self.steps:
            x = x - zp_in
            if kind == "conv":
                k = layer.weight.shape[2]
                if layer.padding:
                    x = np.pad(x, ((0, 0), (0, 0), (layer.padding, layer.padding)))
                win = sliding_window_view(x, k, axis=2)[:, :, ::layer.stride, :]
                n, c, lout, _ = win.shape
                acc = win.transpose(0, 2, 1, 3).reshape(n, lout, c * k) @ wmat + layer.bias
                acc = acc.transpose(0, 2, 1)
            elif kind == "pool":
                acc = x.sum(axis=2)
            else:
                acc = x @ wmat + layer.bias
            zp_out = layer.output_params.zero_point
            x = np.clip(requantize(acc, sig, shift) + zp_out, -128, 127)
            if getattr(layer, "relu", False):
                x = np.maximum(x, zp_out)
        return x.astype(np.int8)

    def logits(self, windows) -> np.ndarray:
        q = self.run_int(self.quantize_input(windows))
        return self.qmodel.output_params.dequantize(q)

    def predict_proba(self, windows) -> np.ndarray:
        return softmax(self.logits(windows))


def quantized_forward(qmodel: QuantizedModel, window) -> np.ndarray:
    """Probabilities for one window (vector) or a stack of windows."""
    single = np.asarray(getattr(window, "values", window)).ndim == 2
    probs = IntegerEngine(qmodel).predict_proba(window)
    return probs[0] if single else probs


def measured_latency(model, window, repetitions: int = 100, warmup: int = WARMUP_RUNS) -> dict:
    """Wall-clock latency of single-window inference in milliseconds.

    ``warmup`` runs precede timing and are discarded.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if isinstance(model, QuantizedModel):
        engine = IntegerEngine(model)
        run = lambda: engine.predict_proba(window)
    elif isinstance(model, FloatModel):
        run = lambda: softmax(forward(model, window, "eval"))
    else:
        raise TypeError(f"cannot time {type(model).__name__}")
    for _ in range(warmup):
        run()
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        run()
        times.append((time.perf_counter() - start) * 1e3)
    return {"min_ms": min(times), "median_ms": statistics.median(times),
            "mean_ms": statistics.fmean(times), "repetitions": repetitions, "warmup": warmup}
