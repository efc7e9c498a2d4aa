import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import partition_sse_oracle
from girb.grouping import (
    GroupAssignment, assign_kdtree, assign_kmeans, fit_kdtree, fit_kmeans, model_from_dict,
)


class TestKMeans:
    def test_two_obvious_clusters(self):
        m = fit_kmeans([[0.0], [1.0], [10.0], [11.0]], k=2, seed=0)
        assert sorted(m.centroids[:, 0].tolist()) == pytest.approx([0.5, 10.5])
        assert m.final_sse == pytest.approx(1.0)

    def test_assignment_by_nearest_centroid(self):
        m = fit_kmeans([[0.0], [1.0], [10.0], [11.0]], k=2, seed=0)
        low = int(np.argmin(m.centroids[:, 0]))
        assert assign_kmeans(m, [2.0]).group == low
        assert assign_kmeans(m, [10.4]).group == 1 - low
        assert assign_kmeans(m, [2.0]).ancestor_path == ()

    def test_tie_goes_to_lowest_index(self):
        m = fit_kmeans([[0.0], [1.0], [10.0], [11.0]], k=2, seed=0)
        assert assign_kmeans(m, [5.5]).group == 0

    def test_k1_is_mean(self, rng):
        x = rng.normal(size=(40, 3))
        m = fit_kmeans(x, k=1)
        np.testing.assert_allclose(m.centroids[0], x.mean(axis=0), atol=1e-12)

    def test_k_equals_n_zero_sse(self, rng):
        x = rng.normal(size=(6, 2))
        assert fit_kmeans(x, k=6, seed=3).final_sse == pytest.approx(0.0, abs=1e-20)

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            fit_kmeans([[0.0], [1.0]], k=3)
        with pytest.raises(ValueError):
            fit_kmeans([[0.0], [1.0]], k=0)

    def test_dimension_mismatch(self):
        m = fit_kmeans([[0.0, 0.0], [1.0, 1.0]], k=1)
        with pytest.raises(ValueError, match="dimension mismatch"):
            assign_kmeans(m, [0.0])

    def test_deterministic_by_seed(self, rng):
        x = rng.normal(size=(200, 4))
        a, b = fit_kmeans(x, k=5, seed=9), fit_kmeans(x, k=5, seed=9)
        np.testing.assert_array_equal(a.centroids, b.centroids)

    def test_serialization_round_trip(self, rng):
        x = rng.normal(size=(50, 3))
        m = fit_kmeans(x, k=4, seed=1, l2_normalize=True)
        again = model_from_dict(json.loads(json.dumps(m.to_dict())))
        np.testing.assert_array_equal(again.predict(x), m.predict(x))
        assert again.l2_normalize

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(3, 60), k=st.integers(1, 5))
    def test_sse_history_non_increasing(self, seed, n, k):
        x = np.random.default_rng(seed).normal(size=(n, 2))
        k = min(k, n)
        hist = fit_kmeans(x, k=k, seed=seed).sse_history
        assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(hist, hist[1:]))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_exhaustive_optimum_with_restarts(self, seed):
        x = np.random.default_rng(seed).normal(size=(8, 2))
        best = partition_sse_oracle(x, 3)
        m = fit_kmeans(x, k=3, seed=seed, n_init=20)
        assert m.final_sse == pytest.approx(best, rel=1e-9)


class TestKdTree:
    def test_single_split_at_median(self):
        t = fit_kdtree([[1.0], [2.0], [3.0], [4.0]], max_depth=1, min_leaf=1)
        root = t.nodes[0]
        assert root.split_value == pytest.approx(2.5)
        assert t.n_leaves == 2 and t.leaf_counts == [2, 2]
        a = assign_kdtree(t, [2.4])
        assert a.group == 0 and len(a.ancestor_path) == 2 and a.ancestor_path[0] == 0
        assert assign_kdtree(t, [2.5]).group == 0
        assert assign_kdtree(t, [2.6]).group == 1

    def test_depth_zero_is_one_leaf(self, rng):
        t = fit_kdtree(rng.normal(size=(30, 2)), max_depth=0, min_leaf=1)
        assert t.n_leaves == 1
        assert assign_kdtree(t, [5.0, -5.0]) == GroupAssignment(0, (0,))

    def test_identical_points_stay_one_leaf(self):
        t = fit_kdtree(np.ones((50, 3)), max_depth=5, min_leaf=1)
        assert t.n_leaves == 1

    def test_min_leaf_blocks_split(self, rng):
        t = fit_kdtree(rng.normal(size=(30, 2)), max_depth=5, min_leaf=20)
        assert t.n_leaves == 1

    def test_splits_widest_dimension(self):
        x = np.array([[0.0, 0.0], [0.1, 10.0], [0.2, 20.0], [0.3, 30.0]])
        assert fit_kdtree(x, max_depth=1, min_leaf=1).nodes[0].split_dim == 1

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(1, 200),
           depth=st.integers(0, 6), min_leaf=st.integers(1, 10))
    def test_structure_invariants(self, seed, n, depth, min_leaf):
        x = np.random.default_rng(seed).normal(size=(n, 3)).round(1)
        t = fit_kdtree(x, max_depth=depth, min_leaf=min_leaf)
        assert sum(t.leaf_counts) == n
        assert t.n_leaves <= 2 ** depth
        assert all(c >= min_leaf for c in t.leaf_counts) or t.n_leaves == 1
        groups = t.predict(x)
        np.testing.assert_array_equal(np.bincount(groups, minlength=t.n_leaves), t.leaf_counts)
        for a in t.assign_many(x[:5]):
            assert a.ancestor_path[0] == 0
            assert t.nodes[a.ancestor_path[-1]].leaf_id == a.group
            assert len(a.ancestor_path) <= depth + 1

    def test_serialization_round_trip(self, rng):
        x = rng.normal(size=(300, 4))
        t = fit_kdtree(x, max_depth=4, min_leaf=10)
        again = model_from_dict(json.loads(json.dumps(t.to_dict())))
        assert again.assign_many(x) == t.assign_many(x)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            model_from_dict({"kind": "ball"})
