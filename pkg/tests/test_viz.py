"""Group-map rendering: synthetic blobs, gray levels, PGM bytes."""

import numpy as np
import pytest

from dgattn.viz import (
    group_levels,
    two_blob_tokens,
    viz_run,
    write_pgm,
)


class TestTwoBlobTokens:
    def test_halves_point_at_different_axes(self, rng):
        grid = two_blob_tokens(8, 6, rng, noise=0.05)
        assert grid.shape == (8, 8, 6)
        left = grid[:, :4].reshape(-1, 6).mean(axis=0)
        right = grid[:, 4:].reshape(-1, 6).mean(axis=0)
        assert left[0] > 0.8 and left[1] < 0.2
        assert right[1] > 0.8 and right[0] < 0.2


class TestGroupLevels:
    def test_two_groups_black_and_white(self):
        levels = group_levels(np.array([[0, 1]]), 2)
        assert levels.tolist() == [[0, 255]]

    def test_single_group_uniform(self):
        levels = group_levels(np.zeros((3, 3), dtype=int), 1)
        assert np.all(levels == 0)

    def test_spacing_even(self):
        levels = group_levels(np.array([[0, 1, 2]]), 3)
        assert levels.tolist() == [[0, 128, 255]]


class TestWritePgm:
    def test_header_and_payload(self):
        data = write_pgm(np.array([[0, 255], [128, 7]], dtype=np.uint8))
        assert data.startswith(b"P5\n2 2\n255\n")
        assert data[-4:] == bytes([0, 255, 128, 7])


class TestVizRun:
    def test_blobs_get_distinct_groups(self):
        res = viz_run(grid=8, channels=6, groups=2, top_k=8, seed=0)
        left = res.group_map[:, :4].flatten()
        right = res.group_map[:, 4:].flatten()
        left_label = np.bincount(left, minlength=2).argmax()
        right_label = np.bincount(right, minlength=2).argmax()
        assert left_label != right_label
        # Majority labels dominate their halves.
        assert np.mean(left == left_label) > 0.9
        assert np.mean(right == right_label) > 0.9

    def test_single_group_uniform_map(self):
        res = viz_run(grid=4, channels=4, groups=1, top_k=4, seed=1)
        assert np.all(res.group_map == 0)
        assert np.all(group_levels(res.group_map, 1) == 0)

    def test_selection_dimensions(self):
        res = viz_run(grid=6, channels=5, groups=3, top_k=7, seed=2)
        assert res.selection.id.shape == (3, 7)
        assert res.group_map.shape == (6, 6)
        assert set(np.unique(res.group_map)) <= {0, 1, 2}

    def test_custom_tokens_respected(self, rng):
        tokens = np.zeros((5, 5, 3))
        tokens[:, :2, 0] = 1.0
        tokens[:, 2:, 1] = 1.0
        res = viz_run(groups=2, top_k=5, seed=2, tokens=tokens)
        assert res.grid == (5, 5)
        left = res.group_map[:, :2]
        right = res.group_map[:, 2:]
        assert np.all(left == left[0, 0])
        assert np.all(right == right[0, 0])
        assert left[0, 0] != right[0, 0]

    def test_deterministic(self):
        a = viz_run(grid=8, channels=6, groups=2, top_k=8, seed=3)
        b = viz_run(grid=8, channels=6, groups=2, top_k=8, seed=3)
        assert np.array_equal(a.group_map, b.group_map)
        assert np.array_equal(a.selection.id, b.selection.id)

    def test_top_k_capped_by_tokens(self):
        with pytest.raises(ValueError):
            viz_run(grid=2, channels=4, groups=2, top_k=9, seed=0)
