import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskcodec.grid import (GridFormatError, TileSet, TokenGrid, grid_from_bytes, grid_to_bytes, read_grid, tile,
                            untile, write_grid)


def test_exact_fit_single_tile():
    g = TokenGrid(np.arange(24 * 24 * 2).reshape(24, 24, 2) % 7)
    ts = tile(g, 24)
    assert ts.tile_count == 1
    np.testing.assert_array_equal(ts.tiles[0], g.values)


def test_partial_tile_is_zero_padded():
    g = TokenGrid(np.ones((25, 24, 2), dtype=int))
    ts = tile(g, 24)
    assert ts.tile_count == 2
    assert np.all(ts.tiles[1][1:] == 0)
    assert np.all(ts.tiles[1][0] == 1)


def test_tile_order_is_row_major():
    h, w, c = 48, 72, 3
    vals = np.zeros((h, w, c), dtype=int)
    for tr in range(2):
        for tc in range(3):
            vals[tr * 24:(tr + 1) * 24, tc * 24:(tc + 1) * 24] = 10 * tr + tc
    ts = tile(TokenGrid(vals), 24)
    assert ts.tile_count == (48 // 24) * (72 // 24) == 6
    assert [int(t[0, 0, 0]) for t in ts.tiles] == [0, 1, 2, 10, 11, 12]


def test_untile_drops_padding():
    g = TokenGrid(np.arange(25 * 24).reshape(25, 24, 1))
    assert untile(tile(g, 24)) == g


def test_untile_rejects_inconsistent_count():
    g = TokenGrid(np.zeros((30, 30, 1), dtype=int))
    ts = tile(g, 16)
    with pytest.raises(ValueError, match="tile count"):
        untile(TileSet(ts.tiles[:3], 30, 30, 16))


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 60), w=st.integers(1, 60), c=st.sampled_from([1, 3, 8]), w_T=st.integers(1, 24),
       seed=st.integers(0, 2**31))
def test_untile_tile_identity(h, w, c, w_T, seed):
    vals = np.random.default_rng(seed).integers(-300, 300, (h, w, c))
    g = TokenGrid(vals)
    assert untile(tile(g, w_T)) == g


def test_file_round_trip(tmp_path, rng):
    g = TokenGrid(rng.integers(-(2**15), 2**15, (7, 9, 3)))
    write_grid(g, tmp_path / "g.bin")
    assert read_grid(tmp_path / "g.bin") == g
    data = (tmp_path / "g.bin").read_bytes()
    assert data[:4] == b"M2TG" and len(data) == 4 + 1 + 12 + 2 * 7 * 9 * 3


def test_file_errors():
    g = TokenGrid(np.zeros((2, 2, 1), dtype=int))
    data = grid_to_bytes(g)
    with pytest.raises(GridFormatError, match="magic"):
        grid_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(GridFormatError, match="truncated"):
        grid_from_bytes(data[:-1])
    with pytest.raises(GridFormatError, match="truncated"):
        grid_from_bytes(data[:5])
    with pytest.raises(GridFormatError, match="int16"):
        grid_to_bytes(TokenGrid(np.array([[[40000]]])))


def test_grid_invariants():
    with pytest.raises(ValueError):
        TokenGrid(np.zeros((0, 3, 1), dtype=int))
    with pytest.raises(ValueError):
        TokenGrid(np.array([[[0.5]]]))
    g = TokenGrid(np.array([[3, -2]]))
    assert g.shape == (1, 2, 1) and (g.ymin, g.ymax) == (-2, 3)


def test_fill_value_for_padding():
    g = TokenGrid(np.full((3, 5, 1), -7))
    ts = tile(g, 4, fill=-7)
    assert np.all(ts.tiles == -7)
    assert untile(ts) == g
