"""Input permutation, block-triangular attention mask and target permutation
for group-causal (M2T) decoding.

For groups M_1..M_S with non-decreasing sizes, input group i holds the tokens
of M_{i-1} followed by |M_i| - |M_{i-1}| pad slots (group 1 is all pads).
Output slot t predicts target_perm[t]. A pad slot carries the positional
embedding of the cell it predicts; a real token slot carries its own cell.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sched import MaskSchedule

PAD = -1


@dataclass(frozen=True)
class M2TLayout:
    input_slots: np.ndarray   # (L,) token position or PAD
    slot_positions: np.ndarray  # (L,) positional-table index per input slot
    attn_mask: np.ndarray     # (L, L) bool, True = may attend
    target_perm: np.ndarray   # (L,) token position predicted at each output slot
    group_sizes: tuple[int, ...]

    @property
    def length(self) -> int:
        return self.input_slots.size

    @property
    def group_of_slot(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.group_sizes)), self.group_sizes)

    @property
    def bounds(self) -> list[tuple[int, int]]:
        ends = np.cumsum(self.group_sizes)
        return [(int(e - s), int(e)) for s, e in zip(self.group_sizes, ends)]

    def permute_inputs(self, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values for each input slot (pads zero-filled) and the pad indicator.

        ``tokens`` has shape (..., L, c) in raster order.
        """
        is_pad = self.input_slots == PAD
        idx = np.where(is_pad, 0, self.input_slots)
        vals = np.take(tokens, idx, axis=-2).copy()
        vals[..., is_pad, :] = 0
        return vals, is_pad

    def permute_targets(self, tokens: np.ndarray) -> np.ndarray:
        return np.take(tokens, self.target_perm, axis=-2)


def block_mask(sizes) -> np.ndarray:
    g = np.repeat(np.arange(len(sizes)), sizes)
    return g[None, :] <= g[:, None]


def layout_from_groups(groups) -> M2TLayout:
    groups = [np.asarray(g, dtype=np.int64) for g in groups]
    sizes = tuple(int(g.size) for g in groups)
    if any(s < 1 for s in sizes):
        raise ValueError("every group must be non-empty")
    for a, b in zip(sizes, sizes[1:]):
        if b < a:
            raise ValueError(f"group sizes must be non-decreasing for M2T, got {sizes}")
    slots, pos = [], []
    prev = np.empty(0, dtype=np.int64)
    for g in groups:
        slots.extend(prev.tolist())
        pos.extend(prev.tolist())
        n_pad = g.size - prev.size
        slots.extend([PAD] * n_pad)
        pos.extend(g[prev.size :].tolist())
        prev = g
    target = np.concatenate(groups)
    if np.unique(target).size != target.size:
        raise ValueError("groups must be disjoint")
    return M2TLayout(
        np.array(slots, dtype=np.int64),
        np.array(pos, dtype=np.int64),
        block_mask(sizes),
        target,
        sizes,
    )


def build_layout(schedule: MaskSchedule) -> M2TLayout:
    if schedule.groups is None:
        raise ValueError("entropy schedules resolve their layout during decoding")
    layout = layout_from_groups(schedule.groups)
    if sorted(layout.target_perm.tolist()) != list(range(schedule.n_positions)):
        raise ValueError("schedule groups do not cover the tile")
    return layout


def positional_index(layout: M2TLayout, slot: int) -> int:
    return int(layout.slot_positions[slot])
