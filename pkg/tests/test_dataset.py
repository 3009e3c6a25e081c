import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uqloc.dataset import (
    NormalizationState, Rectangle, SplitSpec, denormalize_position, denormalize_variance,
    fit_normalizer, normalize, split,
)
from uqloc.scene import CsiDataset


def dataset(features, positions):
    features = np.asarray(features, float)
    positions = np.asarray(positions, float)
    n = len(features)
    return CsiDataset(features, positions, np.ones(n, bool), np.arange(n))


def grid_dataset(n_side=10):
    xs, ys = np.meshgrid(np.arange(n_side, dtype=float), np.arange(n_side, dtype=float))
    pos = np.column_stack([xs.ravel(), ys.ravel()])
    feats = np.column_stack([np.sin(pos[:, 0]), np.cos(pos[:, 1])])
    return dataset(feats, pos)


class TestNormalizer:
    def test_examples(self):
        state = fit_normalizer(dataset([[1, -3], [2, 0.5]], [[0, 0], [10, 20]]))
        assert state.delta_norm == 3
        assert tuple(state.target_min) == (0, 0) and tuple(state.target_max) == (10, 20)
        x, y = normalize(dataset([[1, -3], [2, 0.5]], [[0, 0], [10, 20]]), state)
        assert x[0, 1] == -1
        np.testing.assert_array_equal(y, [[0, 0], [1, 1]])

    def test_single_sample_delta(self):
        state = NormalizationState(fit_normalizer(dataset([[-5, 5], [1, 1]],
                                                          [[0, 0], [1, 1]])).delta_norm,
                                   (0, 0), (1, 1))
        assert state.delta_norm == 5

    def test_all_zero_features(self):
        with pytest.raises(ValueError):
            fit_normalizer(dataset([[0, 0], [0, 0]], [[0, 0], [1, 1]]))

    def test_denormalize_examples(self):
        state = NormalizationState(1.0, (2.0, -4.0), (6.0, 4.0))
        np.testing.assert_array_equal(denormalize_position([0, 0], state), [2, -4])
        np.testing.assert_array_equal(denormalize_position([1, 1], state), [6, 4])
        np.testing.assert_array_equal(denormalize_position([0.5, 0.5], state), [4, 0])
        np.testing.assert_array_equal(denormalize_variance([1.0, 0.25], state), [16, 16])

    @given(arrays(np.float64, (8, 2), elements=st.floats(-1e3, 1e3)),
           arrays(np.float64, (8, 4), elements=st.floats(-10, 10)))
    def test_round_trip_and_feature_range(self, positions, features):
        if np.ptp(positions, axis=0).min() < 1e-3 or np.abs(features).max() == 0:
            return
        data = dataset(features, positions)
        state = fit_normalizer(data)
        x, y = normalize(data, state)
        assert np.abs(x).max() <= 1.0 and np.isclose(np.abs(x).max(), 1.0, rtol=0, atol=0)
        assert y.min() >= 0 and y.max() <= 1 + 1e-15
        np.testing.assert_allclose(denormalize_position(y, state), positions, rtol=0, atol=1e-9)

    def test_save_load(self, tmp_path):
        state = NormalizationState(0.1 + 0.2, (1 / 3, -2.0), (7.0, 1e-3))
        state.save(tmp_path / "n.txt")
        assert NormalizationState.load(tmp_path / "n.txt") == state


class TestSplit:
    def test_sizes(self):
        s = split(grid_dataset(), SplitSpec())
        assert (len(s.train), len(s.val), len(s.test)) == (70, 15, 15)

    def test_partition_is_disjoint_and_covering(self):
        s = split(grid_dataset(), SplitSpec(0.6, 0.3, 0.1, shuffle_seed=4))
        ids = np.concatenate([s.train.location_ids, s.val.location_ids, s.test.location_ids])
        assert sorted(ids) == list(range(100))

    def test_deterministic(self):
        a = split(grid_dataset(), SplitSpec(shuffle_seed=2))
        b = split(grid_dataset(), SplitSpec(shuffle_seed=2))
        c = split(grid_dataset(), SplitSpec(shuffle_seed=3))
        np.testing.assert_array_equal(a.train.location_ids, b.train.location_ids)
        assert not np.array_equal(a.train.location_ids, c.train.location_ids)

    def test_out_of_set_region(self):
        region = Rectangle(2.0, 2.0, 4.0, 5.0)
        s = split(grid_dataset(), SplitSpec(shuffle_seed=1, out_of_set_region=region))
        assert not region.contains(s.train.positions).any()
        assert not region.contains(s.val.positions).any()
        inside = region.contains(s.test.positions)
        np.testing.assert_array_equal(inside, s.test_out_of_set)
        assert inside.sum() == 12
        ids = np.concatenate([s.train.location_ids, s.val.location_ids, s.test.location_ids])
        assert sorted(ids) == list(range(100))

    def test_holdout_keeps_outside_assignment(self):
        base = split(grid_dataset(), SplitSpec(shuffle_seed=1))
        held = split(grid_dataset(), SplitSpec(shuffle_seed=1,
                                               out_of_set_region=Rectangle(2, 2, 4, 5)))
        assert set(held.train.location_ids) <= set(base.train.location_ids)

    def test_region_covering_everything(self):
        with pytest.raises(ValueError):
            split(grid_dataset(), SplitSpec(out_of_set_region=Rectangle(-1, -1, 100, 100)))

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            SplitSpec(0.7, 0.2, 0.2)
        with pytest.raises(ValueError):
            SplitSpec(1.0, 0.0, 0.0)
