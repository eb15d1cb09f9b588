"""Deep-compression chain: magnitude pruning with rewinding, batch-norm
folding, range calibration and full-integer 8-bit quantization."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import N_AXES
from .errors import ConfigError, EmptyDatasetError, InvariantError, ShapeError
from .nnet import (BatchNorm1D, Conv1D, Dense, FloatModel, GlobalAvgPool1D, ReLU, TrainConfig,
                   fit, forward)

PRUNABLE = (Conv1D, Dense)
MIN_RANGE_WIDTH = 1e-6
CALIBRATION_SIZE = 100


# --------------------------------------------------------------------------
# Pruning


@dataclass
class PruneMask:
    """Keep-masks (True = kept) for conv and dense weights, keyed by layer index."""

    masks: dict = field(default_factory=dict)

    def for_parameters(self, model: FloatModel):
        """One mask per entry of ``model.parameters()``; None where unmasked."""
        out = []
        for i, name, p in model.parameters():
            m = self.masks.get(i) if name == "weight" else None
            if m is not None and m.shape != p.shape:
                raise ShapeError(f"layer {i}: mask shape {m.shape} != weight shape {p.shape}")
            out.append(m)
        return out

    def n_pruned(self) -> int:
        return int(sum((~m).sum() for m in self.masks.values()))

    def flat(self) -> np.ndarray:
        return (np.concatenate([self.masks[i].ravel() for i in sorted(self.masks)])
                if self.masks else np.zeros(0, bool))

    @classmethod
    def from_flat(cls, model: FloatModel, flat) -> PruneMask:
        flat = np.asarray(flat, dtype=bool)
        masks, pos = {}, 0
        for i, layer in enumerate(model.layers):
            if isinstance(layer, PRUNABLE):
                n = layer.weight.size
                if pos + n > len(flat):
                    raise ShapeError("mask is shorter than the model's prunable weights")
                masks[i] = flat[pos:pos + n].reshape(layer.weight.shape)
                pos += n
        if pos != len(flat):
            raise ShapeError("mask is longer than the model's prunable weights")
        return cls(masks)


def prune_l1(model: FloatModel, ratio: float = 0.5, scope: str = "global"):
    """Zero the ``floor(ratio * N)`` smallest-magnitude conv/dense weights.

    ``scope="global"`` ranks all prunable weights together, ties broken by
    (layer index, flat index); ``scope="layer"`` prunes each tensor at
    ``ratio`` separately. Pre-existing zeros are ranked like any other value.
    """
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"prune ratio must lie in [0, 1), got {ratio}")
    if scope not in ("global", "layer"):
        raise ConfigError("scope must be 'global' or 'layer'")
    model = model.copy()
    layers = [(i, l) for i, l in enumerate(model.layers) if isinstance(l, PRUNABLE)]
    masks = {i: np.ones(l.weight.shape, bool) for i, l in layers}
    groups = [layers] if scope == "global" else [[item] for item in layers]
    for group in groups:
        mags = np.concatenate([np.abs(l.weight).ravel() for _, l in group])
        n_prune = int(math.floor(ratio * len(mags)))
        # stable sort keeps concatenation order (layer, flat index) among ties
        chosen = np.argsort(mags, kind="stable")[:n_prune]
        keep = np.ones(len(mags), bool)
        keep[chosen] = False
        pos = 0
        for i, l in group:
            n = l.weight.size
            masks[i] = keep[pos:pos + n].reshape(l.weight.shape)
            pos += n
    for i, l in layers:
        l.weight[~masks[i]] = 0.0
    return model, PruneMask(masks)


def check_mask(model: FloatModel, mask: PruneMask):
    for i, m in mask.masks.items():
        w = model.layers[i].weight
        if np.any(w[~m].view(np.uint32 if w.dtype == np.float32 else np.uint64) != 0):
            raise InvariantError(f"layer {i}: pruned weights are no longer bit-zero")


def rewind_retrain(model: FloatModel, mask: PruneMask, train_ds, cfg: TrainConfig,
                   final_epoch_lr: float, val_ds=None, epochs: int | None = None):
    """Retrain surviving weights at the constant final-epoch learning rate.

    Pruned positions get zero gradient and zero momentum; they are checked to
    be bit-zero after every epoch. Returns (model, history).
    """
    epochs = cfg.rewind_epochs if epochs is None else epochs
    param_masks = mask.for_parameters(model)
    if epochs == 0:
        return model.copy(), None
    return fit(model, train_ds, val_ds, cfg, epochs, lambda _: final_epoch_lr,
               mask=param_masks, on_epoch=lambda _, m: check_mask(m, mask))


# --------------------------------------------------------------------------
# Batch-norm folding


def fold_batchnorm(model: FloatModel) -> FloatModel:
    """Merge every eval-mode BatchNorm1D into the convolution before it."""
    layers = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, BatchNorm1D):
            prev = layers[-1] if layers else None
            if not isinstance(prev, Conv1D) or not isinstance(model.layers[i - 1], Conv1D):
                raise ShapeError(f"layer {i}: batch norm without a preceding convolution")
            factor = (layer.gamma.astype(np.float64)
                      / np.sqrt(layer.running_var.astype(np.float64) + layer.eps))
            w = prev.weight.astype(np.float64) * factor[:, None, None]
            b = (prev.bias.astype(np.float64) - layer.running_mean) * factor + layer.beta
            dtype = prev.weight.dtype
            layers[-1] = Conv1D(w.astype(dtype), b.astype(dtype), prev.stride, prev.padding)
        else:
            layers.append(_copy_layer(layer))
    return FloatModel(layers, model.input_length, model.in_channels, model.n_classes)


def _copy_layer(layer):
    if isinstance(layer, Conv1D):
        return Conv1D(layer.weight.copy(), layer.bias.copy(), layer.stride, layer.padding)
    if isinstance(layer, Dense):
        return Dense(layer.weight.copy(), layer.bias.copy())
    return type(layer)()


# --------------------------------------------------------------------------
# Calibration


def choose_calibration(train_ds, val_ds=None, size: int = CALIBRATION_SIZE, seed: int = 0):
    """``size`` windows drawn without replacement from train and val."""
    pool = train_ds.values if val_ds is None or len(val_ds) == 0 else \
        np.concatenate([train_ds.values, val_ds.values])
    if len(pool) == 0:
        raise EmptyDatasetError("empty dataset: no calibration windows")
    if len(pool) < size:
        warnings.warn(f"only {len(pool)} windows available for calibration", stacklevel=2)
        size = len(pool)
    rng = np.random.default_rng(seed)
    return pool[np.sort(rng.choice(len(pool), size, replace=False))]


def calibrate(model: FloatModel, windows) -> list[tuple[float, float]]:
    """Observed (min, max) of the input (entry 0) and each layer output (entry i+1).

    Every range is widened to contain 0 and to be at least 1e-6 wide.
    """
    windows = np.asarray(getattr(windows, "values", windows))
    if len(windows) == 0:
        raise EmptyDatasetError("empty dataset: calibration set is empty")
    if any(isinstance(l, BatchNorm1D) for l in model.layers):
        raise ShapeError("calibrate a folded model (batch norm still present)")
    x = np.ascontiguousarray(windows.transpose(0, 2, 1)).astype(model.dtype)
    if x.shape[1:] != (model.in_channels, model.input_length):
        raise ShapeError(f"calibration windows have shape {windows.shape[1:]}")
    ranges = [(float(x.min()), float(x.max()))]
    for layer in model.layers:
        x, _ = layer.forward(x, False)
        ranges.append((float(x.min()), float(x.max())))
    return [_widen(lo, hi) for lo, hi in ranges]


def _widen(lo, hi):
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    if hi - lo < MIN_RANGE_WIDTH:
        hi = lo + MIN_RANGE_WIDTH
    return lo, hi


# --------------------------------------------------------------------------
# Quantized model


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    scheme: str = "affine"

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ConfigError(f"quantization scale must be positive, got {self.scale}")
        if not -128 <= self.zero_point <= 127:
            raise ConfigError(f"zero point {self.zero_point} outside int8")
        if self.scheme not in ("symmetric", "affine"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "symmetric" and self.zero_point != 0:
            raise ConfigError("symmetric quantization requires zero point 0")

    def quantize(self, x) -> np.ndarray:
        q = np.rint(np.asarray(x, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(q, -128, 127).astype(np.int8)

    def dequantize(self, q) -> np.ndarray:
        return (np.asarray(q, dtype=np.float64) - self.zero_point) * self.scale


@dataclass
class QConv1D:
    weight: np.ndarray  # int8 (out, in, k)
    bias: np.ndarray  # int32, scale = input scale * weight scale
    weight_params: QuantParams
    output_params: QuantParams
    stride: int = 1
    padding: int = 0
    relu: bool = False


@dataclass
class QGlobalAvgPool1D:
    output_params: QuantParams


@dataclass
class QDense:
    weight: np.ndarray  # int8 (out, in)
    bias: np.ndarray
    weight_params: QuantParams
    output_params: QuantParams
    relu: bool = False


class QuantizedModel:
    """Integer layers plus the input quantization; logits leave through the
    last layer's output parameters."""

    def __init__(self, layers, input_params: QuantParams, input_length: int,
                 in_channels: int = N_AXES, n_classes: int = 3):
        self.layers = list(layers)
        self.input_params = input_params
        self.input_length = int(input_length)
        self.in_channels = int(in_channels)
        self.n_classes = int(n_classes)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (QConv1D, QDense)):
                if layer.weight.dtype != np.int8 or layer.bias.dtype != np.int32:
                    raise ShapeError(f"layer {i}: expected int8 weights and int32 biases")

    @property
    def output_params(self) -> QuantParams:
        return self.layers[-1].output_params

    def tensor_params(self) -> list[QuantParams]:
        return [self.input_params] + [l.output_params for l in self.layers]


def activation_params(lo: float, hi: float) -> QuantParams:
    """Affine int8 parameters: scale = (max - min)/255, zp = round(-128 - min/scale)."""
    scale = float(np.float32((hi - lo) / 255.0))
    if not (scale > 0 and math.isfinite(scale)):
        raise ConfigError(f"degenerate activation range [{lo}, {hi}]")
    zp = int(np.clip(np.rint(-128 - lo / scale), -128, 127))
    return QuantParams(scale, zp, "affine")


def quantize_weights(w) -> tuple[np.ndarray, QuantParams]:
    """Symmetric per-tensor int8: scale = max|w|/127, q in [-127, 127].

    An all-zero tensor gets scale 1/127 so its parameters stay valid.
    """
    w = np.asarray(w, dtype=np.float64)
    peak = float(np.abs(w).max()) if w.size else 0.0
    scale = float(np.float32(peak / 127.0 if peak > 0 else 1.0 / 127.0))
    q = np.clip(np.rint(w / scale), -127, 127).astype(np.int8)
    return q, QuantParams(scale, 0, "symmetric")


def quantize_bias(b, input_scale: float, weight_scale: float) -> np.ndarray:
    scale = input_scale * weight_scale
    q = np.rint(np.asarray(b, dtype=np.float64) / scale)
    return np.clip(q, -2**31, 2**31 - 1).astype(np.int32)


def quantize(model: FloatModel, ranges) -> QuantizedModel:
    """Full-integer model from a folded float model and its calibrated ranges.

    A ReLU directly after a conv/dense layer is fused: the layer requantizes
    straight into the ReLU output's parameters and clamps at the zero point.
    """
    if len(ranges) != len(model.layers) + 1:
        raise ShapeError(f"expected {len(model.layers) + 1} ranges, got {len(ranges)}")
    input_params = activation_params(*ranges[0])
    current = input_params
    layers, i = [], 0
    while i < len(model.layers):
        layer = model.layers[i]
        fused = i + 1 < len(model.layers) and isinstance(model.layers[i + 1], ReLU)
        out_range = ranges[i + 2] if fused else ranges[i + 1]
        if isinstance(layer, (Conv1D, Dense)):
            wq, wp = quantize_weights(layer.weight)
            bq = quantize_bias(layer.bias, current.scale, wp.scale)
            out = activation_params(*out_range)
            if isinstance(layer, Conv1D):
                layers.append(QConv1D(wq, bq, wp, out, layer.stride, layer.padding, fused))
            else:
                layers.append(QDense(wq, bq, wp, out, fused))
            current = out
            i += 2 if fused else 1
        elif isinstance(layer, GlobalAvgPool1D):
            current = activation_params(*ranges[i + 1])
            layers.append(QGlobalAvgPool1D(current))
            i += 1
        elif isinstance(layer, BatchNorm1D):
            raise ShapeError(f"layer {i}: fold batch norm before quantizing")
        else:
            raise ShapeError(f"layer {i}: {type(layer).__name__} cannot be quantized standalone")
    return QuantizedModel(layers, input_params, model.input_length, model.in_channels,
                          model.n_classes)


def compression_report(stages: dict) -> dict:
    """Per-stage parameter counts, zero fraction and raw/encoded sizes.

    ``stages`` maps a stage name to a FloatModel or QuantizedModel.
    """
    from .runtime.huffman import huffman_encode
    from .runtime.serialize import serialize
    out = {}
    for name, model in stages.items():
        weights = [l.weight for l in model.layers if hasattr(l, "weight")]
        n = int(sum(w.size for w in weights))
        zeros = int(sum((w == 0).sum() for w in weights))
        raw = serialize(model)
        out[name] = {"weights": n, "zero_fraction": zeros / n if n else 0.0,
                     "serialized_bytes": len(raw),
                     "encoded_bytes": len(huffman_encode(raw).to_bytes())}
    return out
