"""Command-line pipeline: one subcommand per stage, every artifact a file.

Exit codes: 0 success, 2 missing input, 3 invalid config or input, 4 internal
error. On failure a JSON object ``{"error": category, "message": ...}`` is
written to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import CLASSES, TARGET_CLASSES
from . import augment, compress, dataio, decide, nnet
from .config import from_mapping, read_sections
from .errors import ConfigError, EmptyDatasetError, MissingArtifactError, PkgEventsError
from .runtime import energy as power
from .runtime import engine, huffman
from .runtime.serialize import deserialize, serialize, to_c_array

DEFAULT_SEED = 42
AUGMENTATIONS = ("none", "smote", "adasyn")
STAGES = ("float", "pruned", "quantized")


@dataclasses.dataclass(frozen=True)
class WindowConfig:
    length: int = dataio.DEFAULT_WINDOW
    stride: int = 0  # 0 -> non-overlapping

    def __post_init__(self):
        if self.length < 1 or self.stride < 0:
            raise ConfigError("window length must be >= 1 and stride >= 0")


@dataclasses.dataclass(frozen=True)
class PruneConfig:
    ratio: float = 0.5
    scope: str = "global"

    def __post_init__(self):
        if not 0 <= self.ratio < 1:
            raise ConfigError("prune ratio must lie in [0, 1)")
        if self.scope not in ("global", "layer"):
            raise ConfigError("prune scope must be 'global' or 'layer'")


@dataclasses.dataclass(frozen=True)
class CalibrationConfig:
    size: int = compress.CALIBRATION_SIZE

    def __post_init__(self):
        if self.size < 1:
            raise ConfigError("calibration size must be >= 1")


@dataclasses.dataclass(frozen=True)
class ThresholdConfig:
    precision_target: float = 0.95
    recall_floor: float = 0.5


@dataclasses.dataclass(frozen=True)
class BudgetConfig:
    wakes_per_day: float = 100.0
    awake_overhead_ms: float = 500.0
    battery_mwh: float = 4000.0


def _default(cls):
    return dataclasses.field(default_factory=cls)


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    generator: dataio.GeneratorConfig = _default(dataio.GeneratorConfig)
    split: dataio.SplitSpec = _default(dataio.SplitSpec)
    window: WindowConfig = _default(WindowConfig)
    oversample: augment.OversampleConfig = _default(augment.OversampleConfig)
    train: nnet.TrainConfig = _default(nnet.TrainConfig)
    prune: PruneConfig = _default(PruneConfig)
    calibration: CalibrationConfig = _default(CalibrationConfig)
    thresholds: ThresholdConfig = _default(ThresholdConfig)
    energy: power.EnergyProfile = _default(power.EnergyProfile)
    budget: BudgetConfig = _default(BudgetConfig)


SECTIONS = {
    "generator": dataio.GeneratorConfig, "split": dataio.SplitSpec, "window": WindowConfig,
    "oversample": augment.OversampleConfig, "train": nnet.TrainConfig, "prune": PruneConfig,
    "calibration": CalibrationConfig, "thresholds": ThresholdConfig,
}


def load_config(path, seed: int) -> PipelineConfig:
    """Read an INI file; missing sections keep defaults. ``seed`` fills every seed field."""
    sections = read_sections(path) if path else {}
    unknown = sorted(set(sections) - set(SECTIONS) - {"energy"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        mapping = dict(sections.get(name, {}))
        if "seed" in mapping:
            raise ConfigError(f"[{name}] seed is set with --seed, not in the config file")
        obj = from_mapping(cls, mapping, name)
        if any(f.name == "seed" for f in dataclasses.fields(cls)):
            obj = dataclasses.replace(obj, seed=seed)
        parts[name] = obj
    # [energy] carries both the power profile and the battery budget
    raw = sections.get("energy", {})
    profile_keys = {f.name for f in dataclasses.fields(power.EnergyProfile)}
    parts["energy"] = from_mapping(power.EnergyProfile,
                                   {k: v for k, v in raw.items() if k in profile_keys}, "energy")
    parts["budget"] = from_mapping(BudgetConfig,
                                   {k: v for k, v in raw.items() if k not in profile_keys}, "energy")
    return PipelineConfig(**parts)


# --------------------------------------------------------------------------
# File helpers


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"input not found: {path}")
    return path


def _inputs(args, low: int, high: int | None = None) -> list[Path]:
    paths = args.inputs or []
    high = low if high is None else high
    if not low <= len(paths) <= high:
        want = str(low) if low == high else f"{low} to {high}"
        raise ConfigError(f"{args.command}: expected {want} --in path(s), got {len(paths)}")
    return [_need(p) for p in paths]


def _out(args) -> Path:
    if not args.out:
        raise ConfigError(f"{args.command}: --out is required")
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_text(path: Path, text: str):
    path.write_text(text, encoding="utf-8")


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join("" if v is None else str(v) for v in row) + "\n")
    return buf.getvalue()


def load_model(path):
    return deserialize(_need(path).read_bytes())


def save_model(model, path: Path):
    path.write_bytes(serialize(model))


def load_policy(path) -> decide.ThresholdPolicy:
    doc = json.loads(_need(path).read_text(encoding="utf-8"))
    return decide.ThresholdPolicy({k: float(v) for k, v in doc["thresholds"].items()})


def model_proba(model, windows) -> np.ndarray:
    if isinstance(model, compress.QuantizedModel):
        return engine.IntegerEngine(model).predict_proba(windows)
    return nnet.predict_proba(model, windows)


def _check_length(model, ds):
    if len(ds) and ds.window_length != model.input_length:
        raise ConfigError(f"dataset windows have length {ds.window_length}, "
                          f"model expects {model.input_length}")


# --------------------------------------------------------------------------
# Subcommands


def cmd_generate(args, cfg: PipelineConfig):
    out = _out(args)
    streams = dataio.generate_synthetic(cfg.generator, args.seed)
    dataio.save_streams(streams, out, cfg.generator, args.seed)
    counts = {c: sum(len(s) for s in streams if s.label == c) for c in CLASSES}
    return {"streams": len(streams), "class_samples": counts}


def cmd_split(args, cfg: PipelineConfig):
    (src,) = _inputs(args, 1)
    out = _out(args)
    streams = dataio.load_streams(src)
    ds = dataio.windows_from_streams(streams, cfg.window.length, cfg.window.stride or None)
    parts = dataio.split_dataset(ds, cfg.split)
    summary = {}
    for name, part in zip(("train", "val", "test"), parts):
        dataio.save_dataset(part, out / name)
        summary[name] = part.class_counts
    return summary


def cmd_augment(args, cfg: PipelineConfig):
    (src,) = _inputs(args, 1)
    out = _out(args)
    ocfg = cfg.oversample if args.mode is None else dataclasses.replace(cfg.oversample, mode=args.mode)
    ds, summary = augment.oversample(dataio.load_dataset(src), ocfg)
    dataio.save_dataset(ds, out, {"oversample": summary})
    return summary


def cmd_train(args, cfg: PipelineConfig):
    train_dir, *rest = _inputs(args, 1, 2)
    out = _out(args)
    train_ds = dataio.load_dataset(train_dir)
    val_ds = dataio.load_dataset(rest[0]) if rest else None
    model = nnet.build_model(train_ds.window_length, seed=args.seed)
    model, history = nnet.train(model, train_ds, val_ds, cfg.train)
    save_model(model, out)
    _write_text(out.with_suffix(".history.csv"), history.to_csv())
    last = history.records[-1] if history.records else {}
    return {"epochs": len(history.records), "final_lr": history.final_lr,
            "train_loss": last.get("train_loss"), "parameters": model.n_params()}


def _report_doc(model, ds, policy, tag):
    report = decide.evaluate(model_proba(model, ds.values), ds.labels, policy)
    raw = serialize(model)
    doc = report.to_dict()
    doc.update({"augmentation": tag[0], "stage": tag[1], "serialized_bytes": len(raw),
                "encoded_bytes": len(huffman.huffman_encode(raw).to_bytes())})
    return doc


def cmd_eval(args, cfg: PipelineConfig):
    model_path, data_dir, *rest = _inputs(args, 2, 3)
    out = _out(args)
    model = load_model(model_path)
    ds = dataio.load_dataset(data_dir)
    if len(ds) == 0:
        raise EmptyDatasetError(f"empty dataset: {data_dir} has no windows")
    _check_length(model, ds)
    policy = load_policy(rest[0]) if rest else None
    doc = _report_doc(model, ds, policy, (args.augmentation, args.stage))
    if args.format == "csv":
        rows = [(c, doc["precision"][c], doc["recall"][c]) for c in TARGET_CLASSES]
        _write_text(out, _rows_csv(("class", "precision", "recall"), rows))
    else:
        _write_text(out, _dumps(doc))
    return {"precision": doc["precision"], "recall": doc["recall"]}


def cmd_sweep(args, cfg: PipelineConfig):
    model_path, data_dir = _inputs(args, 2)
    out = _out(args)
    model = load_model(model_path)
    ds = dataio.load_dataset(data_dir)
    _check_length(model, ds)
    curve = decide.sweep(model_proba(model, ds.values), ds.labels)
    if args.format == "csv":
        _write_text(out, curve.to_csv())
    else:
        _write_text(out, _dumps({"thresholds": curve.thresholds.tolist(),
                                 "precision": {k: v.tolist() for k, v in curve.precision.items()},
                                 "recall": {k: v.tolist() for k, v in curve.recall.items()}}))
    sel = decide.select_thresholds(curve, cfg.thresholds.precision_target,
                                   cfg.thresholds.recall_floor)
    doc = {"thresholds": sel.policy.thresholds, "achieved": sel.achieved,
           "meets_target": sel.meets_target}
    if args.thresholds:
        path = Path(args.thresholds)
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_text(path, _dumps(doc))
    return doc


def _mask_path(model_out: Path) -> Path:
    return model_out.with_suffix(".mask.npy")


def cmd_prune(args, cfg: PipelineConfig):
    (model_path,) = _inputs(args, 1)
    out = _out(args)
    model = load_model(model_path)
    if not isinstance(model, nnet.FloatModel):
        raise ConfigError("prune expects a float model")
    pruned, mask = compress.prune_l1(model, cfg.prune.ratio, cfg.prune.scope)
    save_model(pruned, out)
    np.save(_mask_path(out), mask.flat(), allow_pickle=False)
    return {"pruned": mask.n_pruned(), "prunable": int(mask.flat().size)}


def cmd_rewind(args, cfg: PipelineConfig):
    model_path, train_dir, *rest = _inputs(args, 2, 3)
    out = _out(args)
    model = load_model(model_path)
    mask_file = Path(args.mask) if args.mask else _mask_path(model_path)
    mask = compress.PruneMask.from_flat(model, np.load(_need(mask_file), allow_pickle=False))
    train_ds = dataio.load_dataset(train_dir)
    val_ds = dataio.load_dataset(rest[0]) if rest else None
    final_lr = cfg.train.lr_at(max(cfg.train.epochs - 1, 0))
    model, history = compress.rewind_retrain(model, mask, train_ds, cfg.train, final_lr, val_ds)
    save_model(model, out)
    np.save(_mask_path(out), mask.flat(), allow_pickle=False)
    if history is not None:
        _write_text(out.with_suffix(".history.csv"), history.to_csv())
    return {"learning_rate": final_lr, "epochs": cfg.train.rewind_epochs}


def cmd_quantize(args, cfg: PipelineConfig):
    model_path, train_dir, *rest = _inputs(args, 2, 3)
    out = _out(args)
    model = load_model(model_path)
    if not isinstance(model, nnet.FloatModel):
        raise ConfigError("quantize expects a float model")
    train_ds = dataio.load_dataset(train_dir)
    val_ds = dataio.load_dataset(rest[0]) if rest else None
    folded = compress.fold_batchnorm(model)
    windows = compress.choose_calibration(train_ds, val_ds, cfg.calibration.size, args.seed)
    qmodel = compress.quantize(folded, compress.calibrate(folded, windows))
    save_model(qmodel, out)
    return {"calibration_windows": len(windows), "layers": len(qmodel.layers)}


def cmd_encode(args, cfg: PipelineConfig):
    (src,) = _inputs(args, 1)
    out = _out(args)
    data = src.read_bytes()
    if args.decode:
        decoded = huffman.huffman_decode(data)
        out.write_bytes(decoded)
        return {"encoded_bytes": len(data), "decoded_bytes": len(decoded)}
    blob = huffman.huffman_encode(data).to_bytes()
    out.write_bytes(blob)
    if args.c_array:
        _write_text(Path(args.c_array), to_c_array(blob, "model"))
    return {"raw_bytes": len(data), "encoded_bytes": len(blob)}


def cmd_infer(args, cfg: PipelineConfig):
    model_path, src, *rest = _inputs(args, 2, 3)
    out = _out(args)
    model = load_model(model_path)
    if src.is_dir():
        windows = dataio.load_dataset(src).values
    else:
        stride = cfg.window.stride or model.input_length
        found = dataio.window_stream(dataio.read_csv(src), model.input_length, stride)
        windows = np.stack([w.values for w in found]) if found else \
            np.zeros((0, model.input_length, 3), np.float32)
    policy = load_policy(rest[0]) if rest else None
    probs = model_proba(model, windows) if len(windows) else np.zeros((0, len(CLASSES)))
    preds = decide.classify_batch(probs, policy) if len(probs) else np.zeros(0, np.int64)
    rows = [(i, CLASSES[int(p)], *(repr(float(x)) for x in pr))
            for i, (p, pr) in enumerate(zip(preds, probs))]
    if args.format == "csv":
        _write_text(out, _rows_csv(("window", "prediction", *(f"p_{c}" for c in CLASSES)), rows))
    else:
        _write_text(out, _dumps([{"window": r[0], "prediction": r[1],
                                  "probabilities": dict(zip(CLASSES, map(float, r[2:])))}
                                 for r in rows]))
    return {"windows": len(rows)}


def cmd_energy(args, cfg: PipelineConfig):
    est = power.estimate_inference_energy(cfg.energy)
    days = power.estimate_wake_budget(cfg.energy, cfg.budget.wakes_per_day,
                                       cfg.budget.awake_overhead_ms, cfg.budget.battery_mwh)
    doc = {"energy_mj": est.energy_mj, "marginal_mj": est.marginal_mj,
           "baseline_mj": est.baseline_mj,
           "battery_days": None if days == power.UNBOUNDED else days,
           "profile": dataclasses.asdict(cfg.energy), "budget": dataclasses.asdict(cfg.budget)}
    if args.out:
        out = _out(args)
        if args.format == "csv":
            keys = ("energy_mj", "marginal_mj", "baseline_mj", "battery_days")
            _write_text(out, _rows_csv(keys, [[doc[k] for k in keys]]))
        else:
            _write_text(out, _dumps(doc))
    return doc


REPORT_COLUMNS = ("augmentation", "stage", "forklift_precision", "forklift_recall",
                  "truck_precision", "truck_recall", "serialized_bytes", "encoded_bytes",
                  "size_ratio")


def build_report(docs) -> dict:
    """Augmentation table (float models) and compression table (all stages)."""
    cells = {}
    for doc in docs:
        key = (doc.get("augmentation"), doc.get("stage"))
        if key[0] not in AUGMENTATIONS or key[1] not in STAGES:
            raise ConfigError(f"eval output tagged {key} is not a report cell")
        if key in cells:
            raise ConfigError(f"duplicate eval output for {key}")
        cells[key] = doc
    rows = []
    for aug in AUGMENTATIONS:
        base = cells.get((aug, "float"))
        for stage in STAGES:
            doc = cells.get((aug, stage))
            if doc is None:
                continue
            ratio = base["encoded_bytes"] / doc["encoded_bytes"] if base else None
            rows.append({"augmentation": aug, "stage": stage,
                         "forklift_precision": doc["precision"]["Forklift"],
                         "forklift_recall": doc["recall"]["Forklift"],
                         "truck_precision": doc["precision"]["Truck"],
                         "truck_recall": doc["recall"]["Truck"],
                         "serialized_bytes": doc["serialized_bytes"],
                         "encoded_bytes": doc["encoded_bytes"], "size_ratio": ratio})
    return {"augmentation_table": [r for r in rows if r["stage"] == "float"],
            "compression_table": rows}


def cmd_report(args, cfg: PipelineConfig):
    paths = _inputs(args, 1, 64)
    out = _out(args)
    report = build_report([json.loads(p.read_text(encoding="utf-8")) for p in paths])
    if args.format == "csv":
        rows = [[r[k] for k in REPORT_COLUMNS] for r in report["compression_table"]]
        _write_text(out, _rows_csv(REPORT_COLUMNS, rows))
    else:
        _write_text(out, _dumps(report))
    return {"rows": len(report["compression_table"])}


def cmd_pipeline(args, cfg: PipelineConfig):
    """Every stage in sequence, through the same subcommands and files."""
    root = _out(args)
    base = ["--seed", str(args.seed)] + (["--config", args.config] if args.config else [])

    def step(name, inputs, out, *extra):
        argv = [name, *base, "--in", *map(str, inputs), "--out", str(out), *extra]
        run(build_parser().parse_args(argv))

    step("generate", [], root / "streams")
    step("split", [root / "streams"], root / "data")
    data = root / "data"
    evals = []
    for aug in AUGMENTATIONS:
        d = root / aug
        step("augment", [data / "train"], d / "train", "--mode", aug)
        step("train", [d / "train", data / "val"], d / "float.tsm")
        step("prune", [d / "float.tsm"], d / "pruned_init.tsm")
        step("rewind", [d / "pruned_init.tsm", d / "train", data / "val"], d / "pruned.tsm")
        step("quantize", [d / "pruned.tsm", d / "train", data / "val"], d / "quantized.tsm")
        for stage in STAGES:
            model = d / f"{stage}.tsm"
            step("sweep", [model, data / "val"], d / f"{stage}.curve.csv", "--format", "csv",
                 "--thresholds", str(d / f"{stage}.thresholds.json"))
            step("eval", [model, data / "test", d / f"{stage}.thresholds.json"],
                 d / f"{stage}.eval.json", "--augmentation", aug, "--stage", stage)
            evals.append(d / f"{stage}.eval.json")
        step("encode", [d / "quantized.tsm"], d / "quantized.tsm.huff")
    step("energy", [], root / "energy.json")
    step("report", evals, root / "report.json")
    return json.loads((root / "report.json").read_text(encoding="utf-8"))


COMMANDS = {
    "generate": cmd_generate, "split": cmd_split, "augment": cmd_augment, "train": cmd_train,
    "eval": cmd_eval, "sweep": cmd_sweep, "prune": cmd_prune, "rewind": cmd_rewind,
    "quantize": cmd_quantize, "encode": cmd_encode, "infer": cmd_infer, "energy": cmd_energy,
    "report": cmd_report, "pipeline": cmd_pipeline,
}

HELP = {
    "generate": "write synthetic accelerometer streams (--out DIR)",
    "split": "window streams and split into train/val/test (--in STREAMS --out DIR)",
    "augment": "oversample the minority class (--in TRAIN --out DIR)",
    "train": "train a float model (--in TRAIN [VAL] --out MODEL)",
    "eval": "evaluate a model (--in MODEL DATA [THRESHOLDS] --out REPORT)",
    "sweep": "precision/recall over the threshold grid (--in MODEL DATA --out CURVE)",
    "prune": "global L1 pruning (--in MODEL --out MODEL); writes MODEL.mask.npy",
    "rewind": "retrain surviving weights (--in PRUNED TRAIN [VAL] --out MODEL)",
    "quantize": "fold BN and quantize to int8 (--in MODEL TRAIN [VAL] --out MODEL)",
    "encode": "Huffman-encode a file (--in FILE --out FILE)",
    "infer": "classify windows (--in MODEL DATA_OR_CSV [THRESHOLDS] --out PREDICTIONS)",
    "energy": "per-inference energy and battery estimate",
    "report": "merge eval outputs into the result tables (--in EVAL... --out REPORT)",
    "pipeline": "run every stage into one directory (--out DIR)",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pkgevents", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED,
                       help=f"seed for every randomized step (default {DEFAULT_SEED})")
        p.add_argument("--in", dest="inputs", nargs="*", default=[], metavar="PATH")
        p.add_argument("--out", metavar="PATH")
        p.add_argument("--format", choices=("json", "csv"), default="json")
        if name == "augment":
            p.add_argument("--mode", choices=augment.MODES, help="override [oversample] mode")
        if name == "eval":
            p.add_argument("--augmentation", default="none", choices=AUGMENTATIONS)
            p.add_argument("--stage", default="float", choices=STAGES)
        if name == "sweep":
            p.add_argument("--thresholds", metavar="PATH", help="write the selected thresholds")
        if name == "rewind":
            p.add_argument("--mask", metavar="PATH", help="mask file (default PRUNED.mask.npy)")
        if name == "encode":
            p.add_argument("--decode", action="store_true", help="decode instead of encode")
            p.add_argument("--c-array", metavar="PATH", help="also write a C array of the output")
    return parser


def run(args) -> dict:
    if args.seed < 0 or args.seed >= 2 ** 64:
        raise ConfigError("--seed must be an unsigned 64-bit integer")
    cfg = load_config(_need(args.config) if args.config else None, args.seed)
    return COMMANDS[args.command](args, cfg)


def _fail(category: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": category, "message": message}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            summary = run(args)
    except PkgEventsError as exc:
        return _fail(exc.category, str(exc), exc.exit_code)
    except FileNotFoundError as exc:
        return _fail("missing_input", str(exc), 2)
    except Exception as exc:  # noqa: BLE001 - every other failure is an internal error
        return _fail("internal", f"{type(exc).__name__}: {exc}", 4)
    sys.stdout.write(_dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
