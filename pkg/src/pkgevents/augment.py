"""SMOTE and ADASYN oversampling of whole accelerometer windows.

Each synthetic window interpolates two real minority windows with a single
coefficient, so the time structure shared by both parents carries over.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import CLASSES
from .config import from_mapping
from .dataio import LabeledDataset
from .errors import ConfigError

MODES = ("none", "smote", "adasyn")


@dataclass(frozen=True)
class OversampleConfig:
    k: int = 5
    beta: float = 0.4
    mode: str = "adasyn"
    seed: int = 0
    minority: str = "Forklift"
    majority: str = "Truck"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        for name in (self.minority, self.majority):
            if name not in CLASSES or name == "Dummy":
                raise ConfigError(f"invalid oversampling class {name!r}")

    @classmethod
    def from_mapping(cls, mapping) -> OversampleConfig:
        return from_mapping(cls, mapping, "oversample")


def _stack(windows) -> np.ndarray:
    """LabeledDataset, array or sequence of TimeWindow -> float64 (n, V_l, 3)."""
    values = getattr(windows, "values", None)
    if values is None:
        values = [np.asarray(getattr(w, "values", w)) for w in windows]
    return np.asarray(values, dtype=np.float64)


def _flat(windows) -> np.ndarray:
    values = _stack(windows)
    return values.reshape(len(values), -1)


def _distances(query_flat, pool_flat) -> np.ndarray:
    """Exact Euclidean distances, (n_query, n_pool)."""
    out = np.empty((len(query_flat), len(pool_flat)))
    for i, q in enumerate(query_flat):
        out[i] = np.sqrt(((pool_flat - q) ** 2).sum(axis=1))
    return out


def knn(query, pool, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest pool members; ties go to the lower index."""
    pool_flat = _flat(pool)
    if len(pool_flat) < k:
        raise ConfigError(f"pool of {len(pool_flat)} is smaller than k={k}")
    q = np.asarray(getattr(query, "values", query), dtype=np.float64).reshape(1, -1)
    d = _distances(q, pool_flat)[0]
    return np.argsort(d, kind="stable")[:k]


@dataclass
class NeighborIndex:
    """k nearest neighbours of each query under Euclidean distance, self excluded."""

    indices: np.ndarray  # (n_query, k), ascending distance
    distances: np.ndarray
    is_majority: np.ndarray  # (n_query, k) bool, or all False when unused


def neighbor_index(query_flat, pool_flat, k, self_index=None, pool_is_majority=None) -> NeighborIndex:
    d = _distances(query_flat, pool_flat)
    if self_index is not None:
        d[np.arange(len(query_flat)), self_index] = np.inf
    available = len(pool_flat) - (1 if self_index is not None else 0)
    if available < k:
        raise ConfigError(f"need more than k={k} candidates, have {available}")
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    dist = np.take_along_axis(d, idx, axis=1)
    maj = (np.zeros(idx.shape, bool) if pool_is_majority is None
           else np.asarray(pool_is_majority, bool)[idx])
    return NeighborIndex(idx, dist, maj)


def _interpolate(flat, shape, sel, nb, alpha):
    # computed in float64 so the float32 result stays between its parents
    new = flat[sel] + alpha[:, None] * (flat[nb] - flat[sel])
    return new.reshape((len(sel),) + shape).astype(np.float32)


def _minority_neighbors(flat, k):
    if len(flat) <= k:
        raise ConfigError(f"minority class has {len(flat)} windows; need more than k={k}")
    return neighbor_index(flat, flat, k, self_index=np.arange(len(flat)))


def smote_generate(minority, count: int, cfg: OversampleConfig, alpha=None) -> LabeledDataset:
    """``count`` windows ``x_sel + a * (x_nb - x_sel)``.

    ``x_sel`` is uniform over the minority windows, ``x_nb`` uniform over its k
    minority neighbours and ``a`` ~ U[0, 1) per window (or the fixed ``alpha``).
    ``parents`` holds (selected, neighbour) indices into ``minority``.
    """
    stacked = _stack(minority)
    flat, shape = stacked.reshape(len(stacked), -1), stacked.shape[1:]
    label = CLASSES.index(cfg.minority)
    index = _minority_neighbors(flat, cfg.k)
    if count == 0:
        return LabeledDataset(np.zeros((0,) + shape, np.float32), [])
    rng = np.random.default_rng(cfg.seed)
    sel = rng.integers(0, len(flat), count)
    nb = index.indices[sel, rng.integers(0, cfg.k, count)]
    a = rng.random(count) if alpha is None else np.full(count, float(alpha))
    values = _interpolate(flat, shape, sel, nb, a)
    return LabeledDataset(values, np.full(count, label), np.ones(count, bool),
                          np.stack([sel, nb], axis=1))


@dataclass
class AdasynPlan:
    delta: np.ndarray  # majority members among the K neighbours of each minority window
    ratios: np.ndarray  # r_i = delta_i / K
    density: np.ndarray  # r_i normalised to sum 1
    counts: np.ndarray  # g_i
    budget: int  # G
    uniform_fallback: bool


def balance_budget(m_majority: int, m_minority: int, beta: float) -> int:
    """G = round((m_l - m_s) * beta), half to even."""
    if m_majority <= m_minority:
        raise ConfigError("no imbalance to correct: majority is not larger than minority")
    return int(np.rint((m_majority - m_minority) * beta))


def allocate(ratios, budget: int):
    """g_i = round(r_i / sum(r) * G); uniform density when every r_i is 0."""
    ratios = np.asarray(ratios, dtype=np.float64)
    total = ratios.sum()
    fallback = total == 0
    density = np.full(len(ratios), 1.0 / len(ratios)) if fallback else ratios / total
    return np.rint(density * budget).astype(np.int64), density, bool(fallback)


def adasyn_counts(minority, majority, cfg: OversampleConfig) -> AdasynPlan:
    min_flat, maj_flat = _flat(minority), _flat(majority)
    budget = balance_budget(len(maj_flat), len(min_flat), cfg.beta)
    pool = np.concatenate([min_flat, maj_flat])
    is_major = np.r_[np.zeros(len(min_flat), bool), np.ones(len(maj_flat), bool)]
    index = neighbor_index(min_flat, pool, cfg.k, self_index=np.arange(len(min_flat)),
                           pool_is_majority=is_major)
    delta = index.is_majority.sum(axis=1)
    ratios = delta / cfg.k
    counts, density, fallback = allocate(ratios, budget)
    return AdasynPlan(delta, ratios, density, counts, budget, fallback)


def adasyn_generate(minority, majority, cfg: OversampleConfig, plan: AdasynPlan | None = None):
    """Synthetic windows allocated by ADASYN density; returns (dataset, plan)."""
    plan = plan or adasyn_counts(minority, majority, cfg)
    stacked = _stack(minority)
    flat, shape = stacked.reshape(len(stacked), -1), stacked.shape[1:]
    index = _minority_neighbors(flat, cfg.k)
    total = int(plan.counts.sum())
    label = CLASSES.index(cfg.minority)
    if total == 0:
        return LabeledDataset(np.zeros((0,) + shape, np.float32), []), plan
    rng = np.random.default_rng(cfg.seed)
    sel = np.repeat(np.arange(len(flat)), plan.counts)
    nb = index.indices[sel, rng.integers(0, cfg.k, total)]
    values = _interpolate(flat, shape, sel, nb, rng.random(total))
    ds = LabeledDataset(values, np.full(total, label), np.ones(total, bool),
                        np.stack([sel, nb], axis=1))
    return ds, plan


def match_smote_count(adasyn_total: int) -> int:
    """SMOTE is run with the same number of synthetics as ADASYN produced."""
    return int(adasyn_total)


def oversample(ds: LabeledDataset, cfg: OversampleConfig):
    """Append synthetic minority windows to ``ds``; returns (dataset, summary).

    Parents of synthetic windows are re-indexed into ``ds``. Only real
    minority windows are interpolation parents; Dummy windows are never used.
    """
    if cfg.mode == "none":
        return ds, {"mode": "none", "synthetic": 0}
    min_c, maj_c = CLASSES.index(cfg.minority), CLASSES.index(cfg.majority)
    min_idx = np.flatnonzero((ds.labels == min_c) & ~ds.synthetic)
    maj_idx = np.flatnonzero((ds.labels == maj_c) & ~ds.synthetic)
    minority, majority = ds.subset(min_idx), ds.subset(maj_idx)
    plan = adasyn_counts(minority, majority, cfg)
    if cfg.mode == "adasyn":
        synth, _ = adasyn_generate(minority, majority, cfg, plan)
    else:
        synth = smote_generate(minority, match_smote_count(int(plan.counts.sum())), cfg)
    if len(synth):
        synth.parents = min_idx[synth.parents]
    summary = {"mode": cfg.mode, "budget": plan.budget, "synthetic": len(synth),
               "minority": len(min_idx), "majority": len(maj_idx),
               "uniform_fallback": plan.uniform_fallback}
    return LabeledDataset.concat([ds, synth]), summary
