from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oilad import iforest
from oilad.errors import ConfigError, DegenerateDataError, ParseError, VersionError
from oilad.iforest import IsoForest, IsoTree, average_path_length, harmonic, score_threshold


def exact_harmonic(n):
    return float(sum(Fraction(1, k) for k in range(1, n + 1)))


class TestPathLength:
    def test_small_values(self):
        assert average_path_length(1) == 0.0
        assert average_path_length(2) == 1.0
        assert average_path_length(3) == pytest.approx(2 * 1.5 - 2 * 2 / 3)

    @pytest.mark.parametrize("n", [1, 2, 5, 63, 64, 65, 200, 1000])
    def test_harmonic_is_exact(self, n):
        assert harmonic(n) == pytest.approx(exact_harmonic(n), rel=1e-14)

    def test_harmonic_asymptotic_branch_is_continuous(self):
        n = 1_000_000
        assert harmonic(n + 1) - harmonic(n) == pytest.approx(1 / (n + 1), rel=1e-4)

    def test_average_path_length_matches_random_bst(self):
        # a random BST of m keys has m + 1 external nodes, like an isolation tree
        # over m + 1 points; its mean unsuccessful-search depth is c(m + 1)
        rng = np.random.default_rng(0)
        m, trials, total = 6, 4000, 0
        for _ in range(trials):
            keys = rng.permutation(m)
            root = None
            children = {}
            for k in keys:
                if root is None:
                    root = k
                    continue
                node = root
                while True:
                    side = 0 if k < node else 1
                    nxt = children.get((node, side))
                    if nxt is None:
                        children[(node, side)] = k
                        break
                    node = nxt
            probe = rng.integers(0, m + 1) - 0.5
            node, depth = root, 0
            while node is not None:
                node = children.get((node, 0 if probe < node else 1))
                depth += 1
            total += depth
        assert total / trials == pytest.approx(average_path_length(m + 1), abs=0.05)


class TestThreshold:
    def test_order_statistic(self):
        s = np.arange(1, 11) / 10
        assert score_threshold(s, 0.0) == 1.0
        assert score_threshold(s, 0.1) == 0.9
        assert score_threshold(s, 0.15) == 0.9
        assert score_threshold(s, 0.2) == 0.8

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=200), st.floats(0, 0.49))
    def test_flag_rate_bound(self, scores, c):
        th = score_threshold(scores, c)
        assert np.mean(np.asarray(scores) > th) <= c + 1e-12


class TestTree:
    def test_isolates_every_point_without_height_limit(self):
        X = np.random.default_rng(0).normal(size=(30, 2))
        tree = IsoTree.build(X, 100, np.random.default_rng(1))
        leaves = tree.feature < 0
        assert np.all(tree.size[leaves] == 1)
        assert tree.size[0] == 30

    def test_split_thresholds_strictly_inside(self):
        X = np.array([[0.0], [1.0]])
        for seed in range(50):
            tree = IsoTree.build(X, 5, np.random.default_rng(seed))
            assert 0.0 < tree.threshold[0] < 1.0

    def test_path_lengths_against_manual_walk(self):
        X = np.random.default_rng(2).normal(size=(40, 2))
        tree = IsoTree.build(X, 4, np.random.default_rng(3))
        Y = np.random.default_rng(4).normal(size=(25, 2))
        for y, h in zip(Y, tree.path_lengths(Y)):
            node, depth = 0, 0
            while tree.feature[node] >= 0:
                node = tree.left[node] if y[tree.feature[node]] < tree.threshold[node] else tree.right[node]
                depth += 1
            assert h == depth + average_path_length(int(tree.size[node]))

    def test_duplicates_stop_splitting(self):
        X = np.ones((5, 2))
        tree = IsoTree.build(X, 10, np.random.default_rng(0))
        assert len(tree.feature) == 1


class TestForest:
    def data(self, n=300, seed=0):
        rng = np.random.default_rng(seed)
        return rng.normal(size=(n, 2))

    def test_outlier_scores_higher(self):
        f = iforest.fit(self.data(), n_trees=100, seed=1)
        s = f.score([[0.0, 0.0], [6.0, 6.0]])
        assert s[1] > 0.6 > s[0]
        assert np.all((s > 0) & (s <= 1))

    @pytest.mark.parametrize("c", [0.0, 0.01, 0.05, 0.2])
    def test_training_flag_rate(self, c):
        X = self.data()
        f = iforest.fit(X, n_trees=50, contamination=c, seed=2)
        assert f.predict(X).mean() <= c + 1 / len(X)

    def test_seeded_and_serializable(self, tmp_path):
        X = self.data()
        a = iforest.fit(X, n_trees=20, contamination=0.05, seed=3)
        b = iforest.fit(X, n_trees=20, contamination=0.05, seed=3)
        assert a.to_json() == b.to_json()
        p = tmp_path / "f.json"
        a.save(p)
        back = IsoForest.load(p)
        assert back.to_json() == a.to_json()
        np.testing.assert_array_equal(back.score(X), a.score(X))
        assert iforest.fit(X, n_trees=20, seed=4).to_json() != a.to_json()

    def test_default_subsample(self):
        assert iforest.fit(self.data(100), n_trees=2).subsample == 100
        assert iforest.fit(self.data(1000), n_trees=2).subsample == 256

    def test_errors(self):
        with pytest.raises(DegenerateDataError):
            iforest.fit(np.ones((10, 2)))
        with pytest.raises(ConfigError):
            iforest.fit(self.data(), contamination=0.5)
        with pytest.raises(ConfigError):
            iforest.fit(self.data(), subsample=1)
        with pytest.raises(ValueError):
            iforest.fit(np.array([[np.nan, 1.0], [0.0, 0.0]]))

    def test_bad_files(self):
        with pytest.raises(ParseError):
            IsoForest.from_json("{")
        with pytest.raises(VersionError):
            IsoForest.from_json('{"oilad_forest_version": 9}')
        with pytest.raises(ParseError):
            IsoForest.from_json('{"oilad_forest_version": 1}')

    def test_expected_depth_scale(self):
        # a point inside a tight cluster needs about c(psi) splits: score near 0.5 or below
        X = self.data(512)
        f = iforest.fit(X, n_trees=100, subsample=256, seed=5)
        assert np.median(f.score(X)) < 0.5
        assert f.subsample == 256
