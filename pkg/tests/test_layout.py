import numpy as np
import pytest

from maskcodec.layout import PAD, block_mask, build_layout, layout_from_groups, positional_index
from maskcodec.sched import make_schedule


def test_two_group_example():
    lay = layout_from_groups([[2], [0, 1, 3]])
    assert lay.input_slots.tolist() == [PAD, 2, PAD, PAD]
    assert lay.target_perm.tolist() == [2, 0, 1, 3]
    expect = np.array([[1, 0, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1], [1, 1, 1, 1]], dtype=bool)
    np.testing.assert_array_equal(lay.attn_mask, expect)
    # the token slot sits where it was seen; each pad carries the cell it predicts
    assert [positional_index(lay, s) for s in range(4)] == [2, 2, 1, 3]


def test_unit_raster_groups_are_shifted_sequence():
    n = 6
    lay = layout_from_groups([[i] for i in range(n)])
    assert lay.input_slots.tolist() == [PAD] + list(range(n - 1))
    np.testing.assert_array_equal(lay.attn_mask, np.tril(np.ones((n, n), dtype=bool)))
    assert lay.target_perm.tolist() == list(range(n))


def test_permute_helpers():
    lay = layout_from_groups([[2], [0, 1, 3]])
    toks = np.arange(8).reshape(4, 2) + 10
    vals, pad = lay.permute_inputs(toks)
    assert pad.tolist() == [True, False, True, True]
    assert vals.tolist() == [[0, 0], [14, 15], [0, 0], [0, 0]]
    assert lay.permute_targets(toks)[:, 0].tolist() == [14, 10, 12, 16]


@pytest.mark.parametrize("kind,S,alpha", [("qlds", 8, 2.2), ("random", 12, 2.2), ("qlds", 4, 1.0), ("random", 1, 3.0)])
def test_layout_invariants(kind, S, alpha):
    sch = make_schedule(kind, S, alpha, 8, seed=5)
    lay = build_layout(sch)
    assert sorted(lay.target_perm.tolist()) == list(range(64))
    g = lay.group_of_slot
    np.testing.assert_array_equal(lay.attn_mask, g[None, :] <= g[:, None])
    for i, (a, b) in enumerate(lay.bounds):
        prev = sch.groups[i - 1] if i else np.empty(0, dtype=int)
        slots = lay.input_slots[a:b]
        assert slots[: prev.size].tolist() == prev.tolist()
        assert np.all(slots[prev.size:] == PAD)
        assert lay.slot_positions[a + prev.size:b].tolist() == sch.groups[i][prev.size:].tolist()


def test_layout_errors():
    with pytest.raises(ValueError, match="non-decreasing"):
        layout_from_groups([[0, 1], [2]])
    with pytest.raises(ValueError, match="disjoint"):
        layout_from_groups([[0], [0, 1]])
    with pytest.raises(ValueError):
        build_layout(make_schedule("entropy", 2, 1.0, 4))


def test_block_mask():
    np.testing.assert_array_equal(block_mask([1, 2]), np.array([[1, 0, 0], [1, 1, 1], [1, 1, 1]], dtype=bool))
