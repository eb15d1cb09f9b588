"""A small 1D-CNN in numpy: forward pass, exact backprop and SGD training.

Tensors flow channel-first, ``(batch, channels, length)``. A window of shape
``(V_l, 3)`` is transposed on entry.
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import CLASSES, N_AXES, TARGET_CLASSES
from .config import from_mapping
from .errors import ConfigError, EmptyDatasetError, ShapeError

PROB_FLOOR = 1e-12


# --------------------------------------------------------------------------
# Layers


@dataclass
class Conv1D:
    weight: np.ndarray  # (out, in, k)
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    param_names = ("weight", "bias")

    def output_shape(self, channels, length):
        out, cin, k = self.weight.shape
        if cin != channels:
            raise ShapeError(f"expects {cin} input channels, got {channels}")
        lout = (length + 2 * self.padding - k) // self.stride + 1
        if lout < 1:
            raise ShapeError(f"input length {length} too short for kernel {k}")
        return out, lout

    def _cols(self, x):
        k = self.weight.shape[2]
        xp = np.pad(x, ((0, 0), (0, 0), (self.padding, self.padding))) if self.padding else x
        win = sliding_window_view(xp, k, axis=2)[:, :, ::self.stride, :]
        n, c, lout, _ = win.shape
        return win.transpose(0, 2, 1, 3).reshape(n, lout, c * k), xp.shape[2]

    def forward(self, x, train=False):
        cols, padded_len = self._cols(x)
        w = self.weight.reshape(self.weight.shape[0], -1)
        y = (cols @ w.T + self.bias).transpose(0, 2, 1)
        return y, (cols, x.shape, padded_len)

    def backward(self, dy, cache):
        cols, (n, c, length), padded_len = cache
        out, _, k = self.weight.shape
        dyt = dy.transpose(0, 2, 1)  # (n, lout, out)
        grads = {
            "weight": np.tensordot(dyt, cols, axes=([0, 1], [0, 1])).reshape(self.weight.shape),
            "bias": dy.sum(axis=(0, 2)),
        }
        dcols = (dyt @ self.weight.reshape(out, -1)).reshape(n, -1, c, k)
        lout = dcols.shape[1]
        dxp = np.zeros((n, c, padded_len), dtype=dy.dtype)
        span = self.stride * (lout - 1) + 1
        for j in range(k):
            dxp[:, :, j:j + span:self.stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        return dxp[:, :, self.padding:self.padding + length], grads


@dataclass
class BatchNorm1D:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    param_names = ("gamma", "beta")

    def output_shape(self, channels, length):
        if len(self.gamma) != channels:
            raise ShapeError(f"expects {len(self.gamma)} channels, got {channels}")
        return channels, length

    def forward(self, x, train=False):
        if train:
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[:, None]) * inv_std[:, None]
        y = self.gamma[:, None] * xhat + self.beta[:, None]
        return y, (xhat, inv_std, train, mean, var, x.shape[0] * x.shape[2])

    def backward(self, dy, cache):
        xhat, inv_std, train, _, _, m = cache
        grads = {"gamma": (dy * xhat).sum(axis=(0, 2)), "beta": dy.sum(axis=(0, 2))}
        dxhat = dy * self.gamma[:, None]
        if not train:
            return dxhat * inv_std[:, None], grads
        dx = (m * dxhat
              - dxhat.sum(axis=(0, 2))[:, None]
              - xhat * (dxhat * xhat).sum(axis=(0, 2))[:, None]) * (inv_std[:, None] / m)
        return dx, grads

    def update_running(self, cache):
        _, _, train, mean, var, m = cache
        if not train:
            return
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = self.momentum
        self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(self.running_mean.dtype)
        self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(self.running_var.dtype)


@dataclass
class ReLU:
    param_names = ()

    def output_shape(self, channels, length):
        return channels, length

    def forward(self, x, train=False):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, {}


@dataclass
class GlobalAvgPool1D:
    param_names = ()

    def output_shape(self, channels, length):
        if length is None:
            raise ShapeError("pooling needs a sequence input")
        return channels, None

    def forward(self, x, train=False):
        return x.mean(axis=2), x.shape[2]

    def backward(self, dy, length):
        return np.repeat(dy[:, :, None] / length, length, axis=2), {}


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    param_names = ("weight", "bias")

    def output_shape(self, channels, length):
        if length is not None:
            raise ShapeError("dense layer needs a pooled (flat) input")
        if self.weight.shape[1] != channels:
            raise ShapeError(f"expects {self.weight.shape[1]} inputs, got {channels}")
        return self.weight.shape[0], None

    def forward(self, x, train=False):
        return x @ self.weight.T + self.bias, x

    def backward(self, dy, x):
        return dy @ self.weight, {"weight": dy.T @ x, "bias": dy.sum(axis=0)}


LAYER_TYPES = (Conv1D, BatchNorm1D, ReLU, GlobalAvgPool1D, Dense)


class FloatModel:
    """Ordered layer stack with a declared ``(input_length, in_channels)`` input."""

    def __init__(self, layers, input_length, in_channels=N_AXES, n_classes=len(CLASSES)):
        self.layers = list(layers)
        self.input_length = int(input_length)
        self.in_channels = int(in_channels)
        channels, length = self.in_channels, self.input_length
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, LAYER_TYPES):
                raise ShapeError(f"layer {i}: unsupported layer {type(layer).__name__}")
            try:
                channels, length = layer.output_shape(channels, length)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from None
            if isinstance(layer, BatchNorm1D) and np.any(layer.running_var <= 0):
                raise ShapeError(f"layer {i}: running variance must be positive")
        if length is not None or channels != n_classes:
            raise ShapeError(f"model output is {channels} x {length}, expected {n_classes} class scores")
        self.n_classes = n_classes

    def parameters(self):
        """(layer index, name, array) for every trainable tensor, in layer order."""
        return [(i, name, getattr(layer, name))
                for i, layer in enumerate(self.layers) for name in layer.param_names]

    def n_params(self) -> int:
        return sum(p.size for _, _, p in self.parameters())

    def copy(self) -> FloatModel:
        return copy.deepcopy(self)

    def astype(self, dtype) -> FloatModel:
        model = self.copy()
        for layer in model.layers:
            for name, value in vars(layer).items():
                if isinstance(value, np.ndarray):
                    setattr(layer, name, value.astype(dtype))
        return model

    @property
    def dtype(self):
        params = self.parameters()
        return params[0][2].dtype if params else np.dtype(np.float32)


def _kaiming(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


def conv_block(rng, cin, cout, kernel, stride, padding):
    return [
        Conv1D(_kaiming(rng, (cout, cin, kernel), cin * kernel), np.zeros(cout, np.float32),
               stride, padding),
        BatchNorm1D(np.ones(cout, np.float32), np.zeros(cout, np.float32),
                    np.zeros(cout, np.float32), np.ones(cout, np.float32)),
        ReLU(),
    ]


def build_model(input_length, channels=(8, 16, 32), kernel=5, stride=2, padding=2,
                n_classes=len(CLASSES), seed=0) -> FloatModel:
    """Stack of [Conv1D -> BatchNorm1D -> ReLU] blocks, global average pool, dense head."""
    rng = np.random.default_rng(seed)
    layers, cin = [], N_AXES
    for cout in channels:
        layers += conv_block(rng, cin, cout, kernel, stride, padding)
        cin = cout
    layers += [GlobalAvgPool1D(),
               Dense(_kaiming(rng, (n_classes, cin), cin), np.zeros(n_classes, np.float32))]
    return FloatModel(layers, input_length, N_AXES, n_classes)


# --------------------------------------------------------------------------
# Forward, loss, backward


def as_batch(x) -> np.ndarray:
    """(V_l, 3) window, TimeWindow, or (n, V_l, 3) stack -> (n, 3, V_l)."""
    values = getattr(x, "values", x)
    arr = np.asarray(values)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected (V_l, 3) windows, got shape {arr.shape}")
    return np.ascontiguousarray(arr.transpose(0, 2, 1))


def _check_input(model, x):
    if x.shape[1:] != (model.in_channels, model.input_length):
        first = type(model.layers[0]).__name__ if model.layers else "input"
        raise ShapeError(f"layer 0 ({first}): expected window ({model.input_length}, "
                         f"{model.in_channels}), got ({x.shape[2]}, {x.shape[1]})")


def _forward(model, x, train):
    caches = []
    for layer in model.layers:
        x, cache = layer.forward(x, train)
        caches.append(cache)
    return x, caches


def forward(model: FloatModel, window, mode: str = "eval") -> np.ndarray:
    """Logits for one window (vector) or a stack of windows (matrix).

    ``mode="train"`` normalises with batch statistics and updates the
    running statistics of every batch-norm layer.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    single = np.asarray(getattr(window, "values", window)).ndim == 2
    x = as_batch(window).astype(model.dtype, copy=False)
    _check_input(model, x)
    logits, caches = _forward(model, x, mode == "train")
    if mode == "train":
        for layer, cache in zip(model.layers, caches):
            if isinstance(layer, BatchNorm1D):
                layer.update_running(cache)
    return logits[0] if single else logits


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 200
    learning_rate: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 2e-5
    label_smoothing: float = 0.1
    # empty -> inverse-frequency weights from the training set
    class_weights: tuple = ()
    # ceiling on derived weights; a near-empty class would otherwise dominate
    class_weight_cap: float = 10.0
    lr_decay: float = 0.5
    lr_period: int = 5
    rewind_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.class_weights and any(w <= 0 for w in self.class_weights):
            raise ConfigError("class weights must be positive")
        if not self.class_weight_cap > 0:
            raise ConfigError("class_weight_cap must be positive")
        if self.epochs < 0 or self.rewind_epochs < 0 or self.batch_size < 1 or self.lr_period < 1:
            raise ConfigError("epochs, rewind_epochs, batch_size and lr_period out of range")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Step schedule: the base rate times ``lr_decay`` per completed ``lr_period``."""
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_period)

    @classmethod
    def from_mapping(cls, mapping) -> TrainConfig:
        return from_mapping(cls, mapping, "train")


def smoothed_targets(labels, n_classes, eps):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    q = np.full((len(labels), n_classes), eps / n_classes)
    q[np.arange(len(labels)), labels] += 1.0 - eps
    return q


def _weights_vector(cfg, n_classes):
    if cfg.class_weights:
        if len(cfg.class_weights) != n_classes:
            raise ConfigError(f"expected {n_classes} class weights, got {len(cfg.class_weights)}")
        return np.asarray(cfg.class_weights, dtype=np.float64)
    return np.ones(n_classes)


def loss(probs, label, cfg: TrainConfig) -> float:
    """Class-weighted cross-entropy against label-smoothed targets.

    Probabilities are floored at 1e-12 before the logarithm.
    """
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    q = smoothed_targets([label], len(p), cfg.label_smoothing)[0]
    w = _weights_vector(cfg, len(p))[int(label)]
    return float(w * -(q * np.log(np.maximum(p, PROB_FLOOR))).sum())


def batch_loss_and_grads(model, x, labels, cfg, train=True):
    """Mean weighted loss over the batch and gradients for ``model.parameters()``.

    The gradient through the probability floor is taken as if unclamped.
    """
    logits, caches = _forward(model, x, train)
    probs = softmax(logits)
    n, c = probs.shape
    q = smoothed_targets(labels, c, cfg.label_smoothing)
    w = _weights_vector(cfg, c)[labels]
    per_sample = w * -(q * np.log(np.maximum(probs, PROB_FLOOR))).sum(axis=1)
    dy = ((probs - q) * (w / n)[:, None]).astype(logits.dtype)
    grads = {}
    for i in range(len(model.layers) - 1, -1, -1):
        dy, layer_grads = model.layers[i].backward(dy, caches[i])
        for name, g in layer_grads.items():
            grads[(i, name)] = g
    ordered = [grads[(i, name)] for i, name, _ in model.parameters()]
    return float(per_sample.mean()), ordered, caches


def backward(model: FloatModel, batch, labels, cfg: TrainConfig, mode: str = "train"):
    """Gradients of the mean batch loss, aligned with ``model.parameters()``."""
    x = as_batch(batch).astype(model.dtype, copy=False)
    _check_input(model, x)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    _, grads, _ = batch_loss_and_grads(model, x, labels, cfg, train=(mode == "train"))
    return grads


def mean_loss(model, ds, cfg, batch_size=1000) -> float:
    """Eval-mode mean weighted loss over a dataset."""
    total = 0.0
    for start in range(0, len(ds), batch_size):
        x = as_batch(ds.values[start:start + batch_size]).astype(model.dtype, copy=False)
        labels = ds.labels[start:start + batch_size]
        probs = softmax(_forward(model, x, False)[0])
        q = smoothed_targets(labels, probs.shape[1], cfg.label_smoothing)
        w = _weights_vector(cfg, probs.shape[1])[labels]
        total += float((w * -(q * np.log(np.maximum(probs, PROB_FLOOR))).sum(axis=1)).sum())
    return total / len(ds)


def predict_proba(model, windows, batch_size=1000) -> np.ndarray:
    values = getattr(windows, "values", windows)
    out = []
    for start in range(0, len(values), batch_size):
        out.append(softmax(forward(model, np.asarray(values[start:start + batch_size]), "eval")))
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


# --------------------------------------------------------------------------
# Training


def class_weights_from(ds) -> tuple:
    """Inverse-frequency weights ``N / (C * count_c)``; their mean is 1."""
    counts = np.bincount(ds.labels, minlength=len(CLASSES)).astype(np.float64)
    missing = [CLASSES[c] for c in np.flatnonzero(counts == 0)]
    if missing:
        raise ConfigError(f"class(es) absent from dataset: {', '.join(missing)}")
    return tuple(float(w) for w in counts.sum() / (len(counts) * counts))


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    final_lr: float = 0.0

    FIELDS = ("epoch", "lr", "train_loss", "val_loss") + tuple(
        f"{c.lower()}_{m}" for c in TARGET_CLASSES for m in ("precision", "recall"))

    def to_csv(self) -> str:
        lines = [",".join(self.FIELDS)]
        for rec in self.records:
            lines.append(",".join(repr(float(rec[k])) if isinstance(rec[k], float) else str(rec[k])
                                  for k in self.FIELDS))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> TrainHistory:
        rows = [line.split(",") for line in text.strip().splitlines()[1:]]
        records = []
        for row in rows:
            rec = dict(zip(cls.FIELDS, row))
            records.append({k: (int(v) if k == "epoch" else (None if v == "None" else float(v)))
                            for k, v in rec.items()})
        final_lr = records[-1]["lr"] if records else 0.0
        return cls(records, final_lr)


def _val_metrics(model, val, cfg):
    from .decide import precision_recall
    if val is None or len(val) == 0:
        return {"val_loss": None, **{f"{c.lower()}_{m}": None for c in TARGET_CLASSES
                                     for m in ("precision", "recall")}}
    preds = predict_proba(model, val).argmax(axis=1)
    out = {"val_loss": mean_loss(model, val, cfg)}
    for name in TARGET_CLASSES:
        p, r = precision_recall(preds, val.labels, CLASSES.index(name))
        out[f"{name.lower()}_precision"] = p
        out[f"{name.lower()}_recall"] = r
    return out


def fit(model, train_ds, val_ds, cfg: TrainConfig, epochs, lr_for_epoch, mask=None,
        on_epoch=None):
    """SGD with momentum and coupled weight decay.

    ``v <- momentum * v + g + weight_decay * w``; ``w <- w - lr * v``.
    ``mask`` (one boolean array per parameter, or None) freezes positions at
    zero: their gradient, velocity and value are held at exactly 0.
    """
    if len(train_ds) == 0:
        raise EmptyDatasetError("empty dataset: training set has no windows")
    model = model.copy()
    if not cfg.class_weights:
        derived = tuple(min(w, cfg.class_weight_cap) for w in class_weights_from(train_ds))
        cfg = dataclasses.replace(cfg, class_weights=derived)
    params = model.parameters()
    velocity = [np.zeros_like(p) for _, _, p in params]
    masks = mask or [None] * len(params)
    rng = np.random.default_rng(cfg.seed)
    x_all = as_batch(train_ds.values).astype(model.dtype, copy=False)
    history = TrainHistory(final_lr=lr_for_epoch(max(epochs - 1, 0)))
    for epoch in range(epochs):
        lr = lr_for_epoch(epoch)
        perm = rng.permutation(len(train_ds))
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            labels = train_ds.labels[idx]
            batch_loss, grads, caches = batch_loss_and_grads(model, x_all[idx], labels, cfg)
            total += batch_loss * len(idx)
            for layer, cache in zip(model.layers, caches):
                if isinstance(layer, BatchNorm1D):
                    layer.update_running(cache)
            for (_, _, p), g, v, m in zip(params, grads, velocity, masks):
                if m is not None:
                    g = g * m
                v *= cfg.momentum
                v += g + cfg.weight_decay * p
                p -= lr * v
                if m is not None:
                    v[~m] = 0
                    p[~m] = 0
        record = {"epoch": epoch + 1, "lr": float(lr), "train_loss": total / len(perm)}
        record.update(_val_metrics(model, val_ds, cfg))
        history.records.append(record)
        if on_epoch is not None:
            on_epoch(epoch, model)
    return model, history


def train(model: FloatModel, train_ds, val_ds, cfg: TrainConfig):
    """Train a copy of ``model`` for ``cfg.epochs`` under the step schedule."""
    if len(train_ds) == 0:
        raise EmptyDatasetError("empty dataset: training set has no windows")
    if cfg.epochs == 0:
        return model.copy(), TrainHistory(final_lr=cfg.learning_rate)
    return fit(model, train_ds, val_ds, cfg, cfg.epochs, cfg.lr_at)
