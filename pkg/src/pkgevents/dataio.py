"""Synthetic accelerometer streams, CSV ingestion, windowing and splitting."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import CLASSES, N_AXES
from .config import from_mapping
from .errors import ConfigError, EmptyDatasetError, InvariantError, MissingArtifactError, ParseError

SAMPLE_RATE_HZ = 20.0
DEFAULT_WINDOW = 32

# Full-size per-class sample counts of the reference recording campaign.
FULL_COUNTS = {"Forklift": 382_000, "Truck": 2_520_000, "Dummy": 9_912}


class Sample(NamedTuple):
    t: float
    ax: float
    ay: float
    az: float


@dataclass
class Stream:
    """One labelled recording: timestamps (s) and an (n, 3) float32 array in g."""

    t: np.ndarray
    acc: np.ndarray
    label: str | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.acc = np.asarray(self.acc, dtype=np.float32).reshape(-1, N_AXES)
        if len(self.t) != len(self.acc):
            raise ValueError("timestamp and sample counts differ")

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i) -> Sample:
        ax, ay, az = (float(v) for v in self.acc[i])
        return Sample(float(self.t[i]), ax, ay, az)


@dataclass
class TimeWindow:
    values: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[1] != N_AXES or self.values.shape[0] < 1:
            raise ValueError(f"window must be (V_l, {N_AXES}), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("window contains non-finite values")


class LabeledDataset:
    """Windows stacked as an (n, V_l, 3) float32 array with integer labels.

    ``synthetic`` flags oversampled windows; ``parents`` holds the two source
    indices of each synthetic window (``-1`` for real windows).
    """

    def __init__(self, values, labels, synthetic=None, parents=None, class_counts=None):
        values = np.asarray(values, dtype=np.float32)
        if values.ndim == 2 and values.shape[0] == 0:
            values = values.reshape(0, 1, N_AXES)
        if values.ndim != 3 or values.shape[2] != N_AXES:
            raise ValueError(f"expected (n, V_l, {N_AXES}) windows, got {values.shape}")
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if len(labels) != len(values):
            raise ValueError("labels and windows differ in length")
        if len(labels) and (labels.min() < 0 or labels.max() >= len(CLASSES)):
            raise ValueError("label index out of range")
        if not np.all(np.isfinite(values)):
            raise ValueError("dataset contains non-finite values")
        n = len(values)
        self.values = values
        self.labels = labels
        self.synthetic = (np.zeros(n, bool) if synthetic is None
                          else np.asarray(synthetic, dtype=bool).reshape(-1))
        self.parents = (np.full((n, 2), -1, np.int64) if parents is None
                        else np.asarray(parents, dtype=np.int64).reshape(n, 2))
        if class_counts is not None and dict(class_counts) != self.class_counts:
            raise InvariantError(
                f"class counts {dict(class_counts)} disagree with labels {self.class_counts}")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> TimeWindow:
        return TimeWindow(self.values[i], int(self.labels[i]))

    @property
    def window_length(self) -> int:
        return self.values.shape[1]

    @property
    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=len(CLASSES))
        return {name: int(c) for name, c in zip(CLASSES, counts)}

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.values[idx], self.labels[idx],
                              self.synthetic[idx], self.parents[idx])

    @classmethod
    def concat(cls, parts) -> LabeledDataset:
        parts = [p for p in parts if len(p)]
        if not parts:
            raise EmptyDatasetError("empty dataset")
        return cls(np.concatenate([p.values for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.synthetic for p in parts]),
                   np.concatenate([p.parents for p in parts]))


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f < 0 or f > 1 for f in fracs):
            raise ConfigError("split fractions must lie in [0, 1]")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions sum to {sum(fracs)}, expected 1")


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters of the synthetic three-class recording campaign.

    Per-class totals are the full-campaign sample counts multiplied by
    ``scale``; each class total is spread evenly over its streams.
    """

    scale: float = 0.01
    sample_rate: float = SAMPLE_RATE_HZ
    forklift_total: int = FULL_COUNTS["Forklift"]
    truck_total: int = FULL_COUNTS["Truck"]
    dummy_total: int = FULL_COUNTS["Dummy"]
    forklift_streams: int = 4
    truck_streams: int = 4
    dummy_streams: int = 1
    noise: float = 0.05
    gravity: float = 1.0
    # Forklift: slow lift/lower motion with pauses, drive vibration, bumps
    lift_freq_lo: float = 0.5
    lift_freq_hi: float = 2.0
    lift_amp: float = 0.25
    lift_pause_rate: float = 0.04
    lift_pause_len: float = 6.0
    drive_freq_lo: float = 4.0
    drive_freq_hi: float = 8.0
    drive_amp: float = 0.08
    burst_rate: float = 0.05
    burst_amp: float = 0.4
    # Truck: sustained 3-6 Hz vibration with idle gaps
    truck_freq_lo: float = 3.0
    truck_freq_hi: float = 6.0
    truck_amp: float = 0.2
    idle_rate: float = 0.02
    idle_len: float = 8.0
    # Dummy: sparse transients
    transient_rate: float = 0.3
    transient_amp: float = 1.0

    def class_totals(self) -> dict[str, int]:
        totals = {"Forklift": self.forklift_total, "Truck": self.truck_total,
                  "Dummy": self.dummy_total}
        return {k: int(math.floor(v * self.scale + 0.5)) for k, v in totals.items()}

    def stream_counts(self) -> dict[str, int]:
        return {"Forklift": self.forklift_streams, "Truck": self.truck_streams,
                "Dummy": self.dummy_streams}

    def validate(self):
        if self.scale <= 0 or self.sample_rate <= 0:
            raise ConfigError("scale and sample_rate must be positive")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        totals, streams = self.class_totals(), self.stream_counts()
        if not any(totals[c] > 0 and streams[c] > 0 for c in CLASSES):
            raise ConfigError("configuration yields zero classes")
        for name in CLASSES:
            if streams[name] < 0:
                raise ConfigError(f"{name}: negative stream count")
            if streams[name] and totals[name] < streams[name]:
                raise ConfigError(f"{name}: zero-duration stream "
                                  f"({totals[name]} samples over {streams[name]} streams)")

    @classmethod
    def from_mapping(cls, mapping) -> GeneratorConfig:
        return from_mapping(cls, mapping, "generator")


# --------------------------------------------------------------------------
# Signatures


def _bumps(t, events):
    """Sum of Gaussian-windowed sinusoids; events are (t0, width, freq, amp, dx, dy, dz)."""
    out = np.zeros((len(t), N_AXES))
    for t0, width, freq, amp, dx, dy, dz in events:
        env = amp * np.exp(-0.5 * ((t - t0) / width) ** 2)
        if freq > 0:
            env = env * np.cos(2 * np.pi * freq * (t - t0))
        out += env[:, None] * np.array([dx, dy, dz])
    return out


def _gaps(t, segments):
    """1 everywhere except inside [start, end) segments."""
    env = np.ones(len(t))
    for start, end in segments:
        env[(t >= start) & (t < end)] = 0.0
    return env


def signature(label: str, t: np.ndarray, params: dict, gravity: float = 1.0) -> np.ndarray:
    """Noise-free (n, 3) acceleration of one stream, float64."""
    t = np.asarray(t, dtype=np.float64)
    if label == "Forklift":
        lift = np.sin(2 * np.pi * params["lift_freq"] * t[:, None]
                      + np.asarray(params["lift_phase"]))
        lift = lift * np.asarray(params["lift_amp"]) * _gaps(t, params["pauses"])[:, None]
        drive = np.sin(2 * np.pi * params["drive_freq"] * t[:, None]
                       + np.asarray(params["drive_phase"])) * np.asarray(params["drive_amp"])
        sig = lift + drive + _bumps(t, params["bursts"])
    elif label == "Truck":
        sig = np.zeros((len(t), N_AXES))
        for freq, amps, phases in zip(params["freqs"], params["amps"], params["phases"]):
            sig += np.sin(2 * np.pi * freq * t[:, None] + np.asarray(phases)) * np.asarray(amps)
        sig = sig * _gaps(t, params["idles"])[:, None]
    elif label == "Dummy":
        sig = _bumps(t, params["transients"])
    else:
        raise ConfigError(f"unknown class {label!r}")
    sig[:, 2] += gravity
    return sig


def _segments(rng, duration, rate, mean_len):
    count = rng.poisson(rate * duration)
    segs = []
    for _ in range(count):
        start = float(rng.uniform(0, duration))
        segs.append([start, start + float(rng.uniform(0.5, 1.5) * mean_len)])
    return sorted(segs)


def _draw_params(label: str, cfg: GeneratorConfig, rng, duration: float) -> dict:
    u = lambda lo, hi, n=None: (rng.uniform(lo, hi, n).tolist() if n else float(rng.uniform(lo, hi)))
    if label == "Forklift":
        bursts = []
        for _ in range(rng.poisson(cfg.burst_rate * duration)):
            bursts.append([u(0, duration), u(0.3, 1.0), u(cfg.drive_freq_lo, cfg.drive_freq_hi),
                           cfg.burst_amp * u(0.5, 1.0), *u(-1, 1, 3)])
        return {
            "lift_freq": u(cfg.lift_freq_lo, cfg.lift_freq_hi),
            "lift_phase": u(0, 2 * np.pi, 3),
            "lift_amp": (cfg.lift_amp * rng.uniform(0.5, 1.0, 3)).tolist(),
            "pauses": _segments(rng, duration, cfg.lift_pause_rate, cfg.lift_pause_len),
            "drive_freq": u(cfg.drive_freq_lo, cfg.drive_freq_hi),
            "drive_phase": u(0, 2 * np.pi, 3),
            "drive_amp": (cfg.drive_amp * rng.uniform(0.5, 1.0, 3)).tolist(),
            "bursts": bursts,
        }
    if label == "Truck":
        return {
            "freqs": u(cfg.truck_freq_lo, cfg.truck_freq_hi, 3),
            "amps": (cfg.truck_amp * rng.uniform(0.3, 1.0, (3, 3))).tolist(),
            "phases": rng.uniform(0, 2 * np.pi, (3, 3)).tolist(),
            "idles": _segments(rng, duration, cfg.idle_rate, cfg.idle_len),
        }
    transients = []
    for _ in range(max(1, rng.poisson(cfg.transient_rate * duration))):
        transients.append([u(0, duration), u(0.05, 0.3), 0.0, cfg.transient_amp, *u(-1, 1, 3)])
    return {"transients": transients}


def stream_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & (2**64 - 1), index])


def generate_synthetic(config: GeneratorConfig | None = None, seed: int = 0) -> list[Stream]:
    """Deterministic labelled streams for every class, in class order."""
    cfg = config or GeneratorConfig()
    cfg.validate()
    totals, n_streams = cfg.class_totals(), cfg.stream_counts()
    streams = []
    index = 0
    for label in CLASSES:
        k = n_streams[label]
        if totals[label] == 0 or k == 0:
            continue
        base, extra = divmod(totals[label], k)
        for j in range(k):
            n = base + (1 if j < extra else 0)
            rng = np.random.default_rng(stream_seed(seed, index))
            t = np.arange(n) / cfg.sample_rate
            params = _draw_params(label, cfg, rng, n / cfg.sample_rate)
            acc = signature(label, t, params, cfg.gravity)
            if cfg.noise > 0:
                acc = acc + rng.normal(0.0, cfg.noise, acc.shape)
            streams.append(Stream(t, acc.astype(np.float32), label, params))
            index += 1
    return streams


# --------------------------------------------------------------------------
# Windowing and splitting


def window_stream(stream, window: int, stride: int) -> list[TimeWindow]:
    """Cut ``stream`` into windows of ``window`` samples every ``stride`` samples."""
    if window < 1 or stride < 1:
        raise ConfigError("window length and stride must be >= 1")
    acc = stream.acc if isinstance(stream, Stream) else np.asarray(
        [[s.ax, s.ay, s.az] for s in stream], dtype=np.float32).reshape(-1, N_AXES)
    label = CLASSES.index(stream.label) if getattr(stream, "label", None) else None
    if len(acc) < window:
        return []
    count = (len(acc) - window) // stride + 1
    return [TimeWindow(acc[i * stride:i * stride + window], label) for i in range(count)]


def windows_from_streams(streams, window: int = DEFAULT_WINDOW, stride: int | None = None) -> LabeledDataset:
    stride = stride or window
    values, labels = [], []
    for s in streams:
        if s.label is None:
            raise ConfigError("stream without label cannot build a labelled dataset")
        for w in window_stream(s, window, stride):
            values.append(w.values)
            labels.append(w.label)
    if not values:
        return LabeledDataset(np.zeros((0, window, N_AXES), np.float32), [])
    return LabeledDataset(np.stack(values), labels)


def _cumulative_counts(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_train = int(math.floor(spec.train_frac * n + 0.5 + 1e-9))
    n_first_two = int(math.floor((spec.train_frac + spec.val_frac) * n + 0.5 + 1e-9))
    n_first_two = min(max(n_first_two, n_train), n)
    return n_train, n_first_two - n_train, n - n_first_two


def split_dataset(ds: LabeledDataset, spec: SplitSpec):
    """Stratified seeded split into (train, val, test).

    Per class, boundaries are rounded cumulatively: ``round(train*n)`` go to
    train and ``round((train+val)*n)`` to train+val, the rest to test. Each
    part then sits within half a window of its exact share.
    """
    parts = ([], [], [])
    for c, name in enumerate(CLASSES):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        if len(idx) < 3:
            warnings.warn(f"class {name} has {len(idx)} windows; all assigned to train",
                          stacklevel=2)
            parts[0].append(idx)
            continue
        rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed) & (2**64 - 1), c]))
        perm = idx[rng.permutation(len(idx))]
        n_train, n_val, _ = _cumulative_counts(len(idx), spec)
        parts[0].append(perm[:n_train])
        parts[1].append(perm[n_train:n_train + n_val])
        parts[2].append(perm[n_train + n_val:])
    out = []
    for chunks in parts:
        idx = np.sort(np.concatenate(chunks)) if chunks else np.zeros(0, np.int64)
        out.append(ds.subset(idx))
    return tuple(out)


# --------------------------------------------------------------------------
# Files


def write_csv(stream: Stream, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["t", "ax", "ay", "az"] + (["label"] if stream.label else [])
        writer.writerow(header)
        for t, row in zip(stream.t, stream.acc):
            cells = [f"{t:.9g}"] + [f"{v:.9g}" for v in row]
            if stream.label:
                cells.append(stream.label)
            writer.writerow(cells)


def read_csv(path) -> Stream:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: missing header")
        header = [h.strip() for h in header]
        if header not in (["t", "ax", "ay", "az"], ["t", "ax", "ay", "az", "label"]):
            raise ParseError(f"{path}: line 1: expected header t,ax,ay,az[,label]")
        has_label = len(header) == 5
        ts, rows, label = [], [], None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields")
            try:
                t, ax, ay, az = (float(v) for v in row[:4])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: malformed number") from None
            if not all(math.isfinite(v) for v in (t, ax, ay, az)):
                raise ParseError(f"{path}: line {lineno}: non-finite value")
            if ts and t <= ts[-1]:
                raise ParseError(f"{path}: line {lineno}: timestamps not increasing")
            if has_label:
                name = row[4].strip()
                if name not in CLASSES:
                    raise ParseError(f"{path}: line {lineno}: unknown label {name!r}")
                if label is not None and name != label:
                    raise ParseError(f"{path}: line {lineno}: mixed labels in one stream")
                label = name
            ts.append(t)
            rows.append((ax, ay, az))
    return Stream(np.array(ts), np.array(rows, dtype=np.float32).reshape(-1, N_AXES), label)


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_streams(streams, directory, config: GeneratorConfig | None = None, seed: int | None = None):
    """Write streams as CSV files plus a ``manifest.json`` listing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(streams):
        name = f"stream_{i:04d}.csv"
        write_csv(s, directory / name)
        entries.append({"file": name, "label": s.label, "samples": len(s), "params": s.params})
    counts = {c: sum(e["samples"] for e in entries if e["label"] == c) for c in CLASSES}
    manifest = {"kind": "streams", "seed": seed, "streams": entries, "class_samples": counts}
    if config is not None:
        manifest["generator"] = dataclasses.asdict(config)
    _dump_json(manifest, directory / "manifest.json")


def _read_manifest(directory, kind):
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise MissingArtifactError(f"no manifest in {directory}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("kind") != kind:
        raise ConfigError(f"{path}: expected a {kind} manifest, found {manifest.get('kind')!r}")
    return manifest


def load_streams(directory) -> list[Stream]:
    manifest = _read_manifest(directory, "streams")
    streams = []
    for entry in manifest["streams"]:
        s = read_csv(Path(directory) / entry["file"])
        s.label = s.label or entry["label"]
        s.params = entry.get("params", {})
        streams.append(s)
    return streams


def save_dataset(ds: LabeledDataset, directory, extra: dict | None = None):
    """Write ``windows.npy`` and a manifest with labels, synthetic flags and parents."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "windows.npy", ds.values, allow_pickle=False)
    manifest = {
        "kind": "windows",
        "window_length": int(ds.window_length),
        "class_counts": ds.class_counts,
        "windows": [
            {"label": CLASSES[int(lab)], "synthetic": bool(syn),
             **({"parents": [int(p) for p in par]} if syn else {})}
            for lab, syn, par in zip(ds.labels, ds.synthetic, ds.parents)
        ],
    }
    manifest.update(extra or {})
    _dump_json(manifest, directory / "manifest.json")


def load_dataset(directory) -> LabeledDataset:
    manifest = _read_manifest(directory, "windows")
    values = np.load(Path(directory) / "windows.npy", allow_pickle=False)
    entries = manifest["windows"]
    labels = [CLASSES.index(e["label"]) for e in entries]
    synthetic = [e.get("synthetic", False) for e in entries]
    parents = [e.get("parents", [-1, -1]) for e in entries]
    if len(entries) == 0:
        values = values.reshape(0, manifest.get("window_length", 1), N_AXES)
    return LabeledDataset(values, labels, synthetic, parents, manifest["class_counts"])
