import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sparseseg.errors import ConfigError
from sparseseg.sparsifier import (BACKGROUND, FOREGROUND, UNKNOWN, Grid, Points, count_inputs, densify_passthrough,
                                  grid, image_seed, labeled_fraction, load_sparse, parse_sparsity, points,
                                  save_sparse, sparsify)

binary_masks = hnp.arrays(np.uint8, st.tuples(st.integers(2, 24), st.integers(2, 24)), elements=st.integers(0, 1))


def half_mask(side=128):
    m = np.zeros((side, side), dtype=np.uint8)
    m[:, : side // 2] = 1
    return m


def lattice_count(h, w, s, o_r, o_c):
    # brute-force enumeration of lattice positions inside the image
    return sum(1 for r in range(h) for c in range(w) if r >= o_r and c >= o_c and (r - o_r) % s == 0
               and (c - o_c) % s == 0)


class TestPoints:
    def test_five_per_class(self):
        sp = points(half_mask(), 5, seed=0)
        assert np.count_nonzero(sp == FOREGROUND) == 5
        assert np.count_nonzero(sp == BACKGROUND) == 5
        assert np.count_nonzero(sp != UNKNOWN) == 10

    def test_all_background(self):
        sp = points(np.zeros((128, 128), np.uint8), 5, seed=0)
        assert np.count_nonzero(sp == BACKGROUND) == 5
        assert np.count_nonzero(sp == FOREGROUND) == 0

    def test_deterministic(self):
        m = half_mask()
        assert np.array_equal(points(m, 5, seed=9), points(m, 5, seed=9))
        assert not np.array_equal(points(m, 5, seed=9), points(m, 5, seed=10))

    @given(binary_masks, st.integers(1, 30), st.integers(0, 2**32))
    def test_counts_follow_min_rule(self, dense, n, seed):
        sp = points(dense, n, seed)
        assert np.count_nonzero(sp == FOREGROUND) == min(n, np.count_nonzero(dense == 1))
        assert np.count_nonzero(sp == BACKGROUND) == min(n, np.count_nonzero(dense == 0))
        known = sp != UNKNOWN
        assert np.array_equal(sp[known], dense[known])

    def test_rejects_bad_n(self):
        with pytest.raises(ConfigError):
            points(half_mask(8), 0, 0)


class TestGrid:
    @pytest.mark.parametrize("s, expected", [(20, 49), (8, 256)])
    def test_zero_offset_counts(self, s, expected):
        sp = grid(half_mask(), s, seed=0, offsets=(0, 0))
        n = np.count_nonzero(sp != UNKNOWN)
        assert n == lattice_count(128, 128, s, 0, 0) == expected

    def test_budget_under_two_percent(self):
        sp = grid(half_mask(), 8, seed=0, offsets=(0, 0))
        assert labeled_fraction(sp) == 256 / 16384 == 0.015625
        assert labeled_fraction(sp) < 0.02

    @pytest.mark.parametrize("offsets", [(0, 0), (5, 31), (63, 63)])
    def test_spacing_equal_to_side(self, offsets):
        sp = grid(half_mask(64), 64, seed=0, offsets=offsets)
        assert np.count_nonzero(sp != UNKNOWN) == 1

    def test_rejects_oversized_spacing(self):
        with pytest.raises(ConfigError):
            grid(half_mask(16), 17, seed=0)

    @given(binary_masks, st.integers(2, 12), st.integers(0, 2**32))
    def test_lattice_property(self, dense, s, seed):
        h, w = dense.shape
        if s > min(h, w):
            return
        sp = grid(dense, s, seed)
        rows, cols = np.nonzero(sp != UNKNOWN)
        o_r, o_c = rows.min(), cols.min()
        assert o_r < s and o_c < s
        assert len(set(rows)) == math.ceil((h - o_r) / s)
        assert len(set(cols)) == math.ceil((w - o_c) / s)
        assert rows.size == lattice_count(h, w, s, o_r, o_c)
        known = sp != UNKNOWN
        assert np.array_equal(sp[known], dense[known])

    @given(st.integers(2, 40), st.integers(2, 40))
    def test_fraction_monotone_in_spacing(self, s1, s2):
        s1, s2 = sorted((s1, s2))
        m = half_mask(64)
        f1 = labeled_fraction(grid(m, s1, 0, offsets=(0, 0)))
        f2 = labeled_fraction(grid(m, s2, 0, offsets=(0, 0)))
        assert f1 >= f2

    def test_offsets_cover_range(self):
        seen = {int(np.nonzero(grid(half_mask(16), 4, seed)[0:4, 0:4] != UNKNOWN)[0][0]) for seed in range(200)}
        assert seen == {0, 1, 2, 3}


class TestPassthroughAndCounts:
    @given(binary_masks)
    def test_passthrough(self, dense):
        sp = densify_passthrough(dense)
        assert np.count_nonzero(sp == UNKNOWN) == 0
        assert np.array_equal(sp, dense)
        assert labeled_fraction(sp) == 1.0

    def test_count_inputs(self):
        assert count_inputs(points(half_mask(), 5, 1)) == 5
        assert count_inputs(np.full((8, 8), UNKNOWN, np.uint8)) == 0
        assert count_inputs(grid(np.zeros((32, 32), np.uint8), 8, 1)) == 0
        assert labeled_fraction(np.full((8, 8), UNKNOWN, np.uint8)) == 0.0


def test_image_seed_is_stable_blake2b():
    expected = int.from_bytes(hashlib.blake2b(b"7|ds/0001|points5", digest_size=8).digest(), "little")
    assert image_seed(7, "ds/0001", "points5") == expected
    assert image_seed(7, "ds/0001", "points5") != image_seed(8, "ds/0001", "points5")


def test_parse_sparsity_round_trip():
    for spec in (Points(5), Grid(8), parse_sparsity("dense")):
        assert parse_sparsity(spec.tag) == spec
    assert parse_sparsity("grid-12") == Grid(12)
    with pytest.raises(ConfigError):
        parse_sparsity("scribble3")
    with pytest.raises(ConfigError):
        Grid(1)


def test_png_round_trip(tmp_path):
    sp = sparsify(half_mask(32), Points(4), 3)
    save_sparse(tmp_path / "m.png", sp)
    assert np.array_equal(load_sparse(tmp_path / "m.png"), sp)
