import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pkgevents import augment
from pkgevents.augment import (OversampleConfig, adasyn_counts, adasyn_generate, allocate,
                               balance_budget, knn, match_smote_count, oversample,
                               smote_generate)
from pkgevents.dataio import LabeledDataset
from pkgevents.errors import ConfigError

V = 8


def _const(*levels):
    return np.stack([np.full((V, 3), lv, np.float32) for lv in levels])


def _cloud(n, center, spread, seed):
    rng = np.random.default_rng(seed)
    return (center + spread * rng.standard_normal((n, V, 3))).astype(np.float32)


def _brute_knn(query, pool, k):
    q = np.asarray(query, np.float64)
    d = [np.sqrt(((np.asarray(p, np.float64) - q) ** 2).sum()) for p in pool]
    return sorted(range(len(pool)), key=lambda i: (d[i], i))[:k]


class TestKnn:
    def test_exact_member(self):
        pool = _cloud(10, 0.0, 1.0, 0)
        assert knn(pool[4], pool, 1).tolist() == [4]

    def test_constant_windows(self):
        pool = _const(0, 1, 2)
        idx = knn(pool[0], pool[1:], 2)
        assert idx.tolist() == [0, 1]
        d = [np.linalg.norm(pool[1 + i] - pool[0]) for i in idx]
        np.testing.assert_allclose(d, np.sqrt(3 * V) * np.array([1, 2]))

    def test_whole_pool_sorted(self):
        pool = _cloud(7, 0.0, 1.0, 1)
        q = _cloud(1, 0.0, 1.0, 2)[0]
        idx = knn(q, pool, 7)
        d = np.linalg.norm((pool - q).reshape(7, -1), axis=1)
        assert sorted(idx.tolist()) == list(range(7))
        assert np.all(np.diff(d[idx]) >= 0)

    def test_ties_by_index(self):
        pool = _const(1, -1, 1, 3)
        assert knn(_const(0)[0], pool, 3).tolist() == [0, 1, 2]

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 20), k=st.integers(1, 20))
    def test_matches_brute_force(self, seed, n, k):
        # integer grid: exact ties in any precision
        pool = np.round(_cloud(n, 0.0, 2.0, seed))
        q = np.round(_cloud(1, 0.0, 2.0, seed + 1)[0])
        if k > n:
            with pytest.raises(ConfigError):
                knn(q, pool, k)
        else:
            assert knn(q, pool, k).tolist() == _brute_knn(q, pool, k)

    def test_neighbor_index_excludes_self(self):
        flat = _cloud(6, 0.0, 1.0, 3).reshape(6, -1)
        index = augment.neighbor_index(flat, flat, 3, self_index=np.arange(6))
        assert not np.any(index.indices == np.arange(6)[:, None])
        assert np.all(np.diff(index.distances, axis=1) >= 0)


class TestSmote:
    def test_alpha_zero_is_selected(self):
        minority = _cloud(10, 0.0, 1.0, 0)
        out = smote_generate(minority, 20, OversampleConfig(seed=1), alpha=0.0)
        np.testing.assert_array_equal(out.values, minority[out.parents[:, 0]])

    def test_alpha_one_is_neighbor(self):
        minority = _cloud(10, 0.0, 1.0, 0)
        out = smote_generate(minority, 20, OversampleConfig(seed=1), alpha=1.0)
        np.testing.assert_array_equal(out.values, minority[out.parents[:, 1]])

    def test_midpoint_of_constants(self):
        out = smote_generate(_const(0, 2), 4, OversampleConfig(k=1, seed=0), alpha=0.5)
        np.testing.assert_array_equal(out.values, np.ones((4, V, 3), np.float32))

    def test_count_labels_and_flags(self):
        out = smote_generate(_cloud(10, 0.0, 1.0, 0), 33, OversampleConfig(seed=2))
        assert len(out) == 33
        assert np.all(out.labels == 0) and np.all(out.synthetic)

    def test_neighbor_is_among_k_nearest(self):
        minority = _cloud(12, 0.0, 1.0, 4)
        cfg = OversampleConfig(k=3, seed=5)
        out = smote_generate(minority, 50, cfg)
        for sel, nb in out.parents:
            others = [i for i in range(12) if i != sel]
            near = _brute_knn(minority[sel], minority[others], 3)
            assert nb in [others[i] for i in near]

    def test_one_alpha_per_window(self):
        minority = _cloud(10, 0.0, 1.0, 0)
        out = smote_generate(minority, 10, OversampleConfig(seed=3))
        for w, (a, b) in zip(out.values, out.parents):
            diff = (minority[b] - minority[a]).astype(np.float64)
            alpha = ((w - minority[a]) / diff).reshape(-1)
            np.testing.assert_allclose(alpha, alpha[0], atol=1e-4)

    def test_zero_count_empty(self):
        assert len(smote_generate(_cloud(10, 0.0, 1.0, 0), 0, OversampleConfig())) == 0

    def test_too_few_minority(self):
        with pytest.raises(ConfigError):
            smote_generate(_cloud(5, 0.0, 1.0, 0), 3, OversampleConfig(k=5))

    def test_deterministic(self):
        minority = _cloud(10, 0.0, 1.0, 0)
        a = smote_generate(minority, 15, OversampleConfig(seed=9))
        b = smote_generate(minority, 15, OversampleConfig(seed=9))
        np.testing.assert_array_equal(a.values, b.values)


class TestAdasynCounts:
    def test_ratio(self):
        # three majority windows sit closer to the first minority window than its kin
        minority = _const(0, 10, 11, 12, 13, 14)
        majority = _const(0.1, 0.2, 0.3, 20, 21, 22, 23)
        plan = adasyn_counts(minority, majority, OversampleConfig(k=5))
        assert plan.delta[0] == 3
        assert plan.ratios[0] == pytest.approx(0.6)

    def test_full_scale_budget(self):
        assert balance_budget(2_520_000, 382_000, 0.4) == 855_200

    def test_two_window_allocation(self):
        counts, density, fallback = allocate([0.2, 0.6], 100)
        assert counts.tolist() == [25, 75] and not fallback
        np.testing.assert_allclose(density, [0.25, 0.75])

    def test_no_imbalance(self):
        with pytest.raises(ConfigError, match="no imbalance"):
            balance_budget(10, 10, 0.4)

    def test_uniform_fallback(self):
        minority = _cloud(9, 0.0, 0.1, 0)
        majority = _cloud(40, 50.0, 0.1, 1)
        plan = adasyn_counts(minority, majority, OversampleConfig(k=3, beta=0.4))
        assert plan.uniform_fallback
        assert plan.counts.max() - plan.counts.min() <= 1

    @settings(max_examples=40, deadline=None)
    @given(ratios=st.lists(st.integers(0, 5), min_size=1, max_size=40),
           budget=st.integers(0, 5000))
    def test_budget_slack(self, ratios, budget):
        counts, density, _ = allocate(np.asarray(ratios) / 5, budget)
        assert abs(int(counts.sum()) - budget) <= len(ratios)
        assert density.sum() == pytest.approx(1.0)


class TestAdasynGenerate:
    def test_boundary_cluster_dominates(self):
        near = _cloud(10, 0.1, 0.3, 0)
        far = _cloud(10, 30.0, 0.3, 1)
        majority = _cloud(60, 0.0, 0.3, 2)
        minority = np.concatenate([near, far])
        cfg = OversampleConfig(k=5, beta=0.4, seed=3)
        out, plan = adasyn_generate(minority, majority, cfg)
        # brute-force recount of the density
        pool = np.concatenate([minority, majority])
        delta = []
        for i in range(20):
            others = [j for j in range(len(pool)) if j != i]
            nb = _brute_knn(minority[i], pool[others], 5)
            delta.append(sum(others[j] >= 20 for j in nb))
        np.testing.assert_array_equal(plan.delta, delta)
        assert len(out) == plan.counts.sum()
        assert np.mean(out.parents[:, 0] < 10) >= 0.9

    def test_zero_count_windows_parent_nothing(self):
        near = _cloud(6, 0.1, 0.3, 0)
        far = _cloud(6, 30.0, 0.3, 1)
        majority = _cloud(40, 0.0, 0.3, 2)
        minority = np.concatenate([near, far])
        out, plan = adasyn_generate(minority, majority, OversampleConfig(k=3, seed=1))
        idle = np.flatnonzero(plan.counts == 0)
        assert len(idle) and not np.isin(out.parents[:, 0], idle).any()


def _mixed(seed=0):
    rng = np.random.default_rng(seed)
    values = np.concatenate([_cloud(15, 0.5, 0.5, seed), _cloud(50, 0.0, 0.5, seed + 1),
                             _cloud(4, 5.0, 0.5, seed + 2)])
    labels = [0] * 15 + [1] * 50 + [2] * 4
    order = rng.permutation(len(labels))
    return LabeledDataset(values[order], np.asarray(labels)[order])


class TestOversample:
    @pytest.mark.parametrize("mode", ["smote", "adasyn"])
    def test_convex_pure_and_budgeted(self, mode):
        ds = _mixed()
        out, summary = oversample(ds, OversampleConfig(mode=mode, seed=4))
        synth = out.subset(np.flatnonzero(out.synthetic))
        assert len(synth) == summary["synthetic"] > 0
        assert np.all(synth.labels == 0)
        assert abs(len(synth) - balance_budget(50, 15, 0.4)) <= 15
        for w, (a, b) in zip(synth.values, synth.parents):
            assert out.labels[a] == out.labels[b] == 0
            assert not out.synthetic[a] and not out.synthetic[b]
            lo = np.minimum(out.values[a], out.values[b])
            hi = np.maximum(out.values[a], out.values[b])
            assert np.all(lo <= w) and np.all(w <= hi)

    def test_smote_matches_adasyn_size(self):
        ds = _mixed(1)
        _, a = oversample(ds, OversampleConfig(mode="adasyn", seed=2))
        _, s = oversample(ds, OversampleConfig(mode="smote", seed=2))
        assert a["synthetic"] == s["synthetic"]

    def test_none_is_identity(self):
        ds = _mixed()
        out, summary = oversample(ds, OversampleConfig(mode="none"))
        assert out is ds and summary["synthetic"] == 0

    def test_real_windows_preserved(self):
        ds = _mixed()
        out, _ = oversample(ds, OversampleConfig(seed=0))
        np.testing.assert_array_equal(out.values[:len(ds)], ds.values)

    def test_deterministic(self):
        ds = _mixed()
        a, _ = oversample(ds, OversampleConfig(seed=7))
        b, _ = oversample(ds, OversampleConfig(seed=7))
        np.testing.assert_array_equal(a.values, b.values)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"k": 0}, {"beta": 1.5}, {"mode": "borderline"},
                                        {"minority": "Dummy"}])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            OversampleConfig(**kwargs)

    @pytest.mark.parametrize("n", [855_200, 0, 100])
    def test_match_smote_count(self, n):
        assert match_smote_count(n) == n
