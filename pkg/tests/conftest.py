import warnings

import numpy as np
import pytest

from pkgevents import dataio, nnet
from pkgevents.nnet import BatchNorm1D, Conv1D, Dense, FloatModel, GlobalAvgPool1D, ReLU

# (criterion number, verdict line) filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


def toy_dataset(n_per_class=10, length=16, classes=(0, 1, 2), seed=0, spread=0.1):
    """Linearly separable windows: class c sits at a distinct per-axis offset."""
    rng = np.random.default_rng(seed)
    centers = {0: (1.0, 0.0, 0.0), 1: (0.0, 1.0, 0.0), 2: (0.0, 0.0, 1.0)}
    values, labels = [], []
    for c in classes:
        base = np.asarray(centers[c], dtype=np.float32)
        values.append(base + spread * rng.standard_normal((n_per_class, length, 3)))
        labels += [c] * n_per_class
    return dataio.LabeledDataset(np.concatenate(values).astype(np.float32), labels)


def tiny_model(length=16, channels=(4, 8), seed=0, dtype=np.float64, randomize_bn=True):
    """Small conv net; optionally perturbs batch-norm parameters and statistics."""
    model = nnet.build_model(length, channels=channels, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    if randomize_bn:
        for layer in model.layers:
            if isinstance(layer, BatchNorm1D):
                c = len(layer.gamma)
                layer.gamma = rng.uniform(0.5, 1.5, c).astype(np.float32)
                layer.beta = rng.uniform(-0.2, 0.2, c).astype(np.float32)
                layer.running_mean = rng.uniform(-0.3, 0.3, c).astype(np.float32)
                layer.running_var = rng.uniform(0.5, 2.0, c).astype(np.float32)
    return model.astype(dtype)


def zero_model(length=8):
    return FloatModel([
        Conv1D(np.zeros((2, 3, 3), np.float32), np.zeros(2, np.float32), 1, 1),
        ReLU(), GlobalAvgPool1D(),
        Dense(np.zeros((3, 2), np.float32), np.zeros(3, np.float32)),
    ], length)


@pytest.fixture(scope="session")
def default_splits():
    """Default synthetic campaign at seed 42, windowed and split."""
    streams = dataio.generate_synthetic(dataio.GeneratorConfig(), 42)
    ds = dataio.windows_from_streams(streams)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return dataio.split_dataset(ds, dataio.SplitSpec(seed=42))


@pytest.fixture(scope="session")
def trained_default(default_splits):
    """Default architecture trained on the un-augmented seed-42 split."""
    train, val, _ = default_splits
    model = nnet.build_model(train.window_length, seed=42)
    trained, history = nnet.train(model, train, val, nnet.TrainConfig(seed=42))
    return trained, history


def gradcheck(model, windows, labels, cfg, h=1e-3, train=False, floor=1e-8):
    """Relative errors between analytic and central-difference gradients, one per parameter.

    ``floor`` keeps the denominator away from zero for vanishing gradients.
    """
    x = nnet.as_batch(windows).astype(model.dtype)
    labels = np.asarray(labels)
    _, grads, _ = nnet.batch_loss_and_grads(model, x, labels, cfg, train=train)
    errors = []
    for (_, _, p), g in zip(model.parameters(), grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            plus = nnet.batch_loss_and_grads(model, x, labels, cfg, train=train)[0]
            flat[j] = old - h
            minus = nnet.batch_loss_and_grads(model, x, labels, cfg, train=train)[0]
            flat[j] = old
            num = (plus - minus) / (2 * h)
            errors.append(abs(gflat[j] - num) / max(abs(gflat[j]), abs(num), floor))
    return np.asarray(errors)
