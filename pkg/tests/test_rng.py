"""Tests for seeded random streams and chunked execution."""

import numpy as np
import pytest

from vblab.rng import CHUNK_SIZE, chunk_bounds, make_rng, map_chunks, spawn_seeds


class TestMakeRng:
    """Tests for keyed Philox streams."""

    def test_same_keys_same_stream(self):
        a = make_rng(7, 'noise-symmetric', 0).random(5)
        b = make_rng(7, 'noise-symmetric', 0).random(5)
        np.testing.assert_array_equal(a, b)

    def test_keys_separate_streams(self):
        a = make_rng(7, 'noise-symmetric', 0).random(5)
        b = make_rng(7, 'noise-symmetric', 1).random(5)
        c = make_rng(7, 'shuffle', 0).random(5)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_seed_changes_stream(self):
        assert not np.array_equal(make_rng(1).random(3), make_rng(2).random(3))

    def test_negative_seed(self):
        with pytest.raises(ValueError, match='non-negative'):
            make_rng(-1)


class TestChunks:
    """Tests for fixed chunking."""

    def test_bounds_cover_range(self):
        chunks = chunk_bounds(10, 4)
        assert [(c.start, c.stop) for c in chunks] == [(0, 4), (4, 8), (8, 10)]

    def test_empty(self):
        assert chunk_bounds(0) == []
        assert map_chunks(lambda i, span: i, 0) == []

    def test_default_chunk_size(self):
        assert len(chunk_bounds(CHUNK_SIZE + 1)) == 2

    def test_results_in_order_for_any_jobs(self):
        """Thread pool results come back in chunk order."""
        def draw(index, span):
            return make_rng(3, 'test', index).random(len(span))

        serial = np.concatenate(map_chunks(draw, 10_000, jobs=1))
        threaded = np.concatenate(map_chunks(draw, 10_000, jobs=4))
        np.testing.assert_array_equal(serial, threaded)

    def test_spawn_seeds(self):
        assert list(spawn_seeds(123, 3)) == [123, 1123, 2123]
        assert list(spawn_seeds(5, 2, stride=10)) == [5, 15]
