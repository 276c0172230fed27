"""Masking schedules: power-law group sizes and location rules.

A schedule partitions the w_T**2 token positions of a tile (raster indices)
into S ordered groups. Step i codes group i conditioned on groups 1..i-1.

The ``random`` location rule shuffles positions with a Fisher-Yates pass
driven by SplitMix64 so that any implementation can reproduce it::

    state += 0x9E3779B97F4A7C15                    (mod 2**64)
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9       (mod 2**64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB       (mod 2**64)
    return z ^ (z >> 31)

    for i = n-1 down to 1: j = next() % (i + 1); swap(pos[i], pos[j])
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .qlds import qlds_order

KINDS = ("random", "entropy", "qlds")
_MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)


def seeded_permutation(n: int, seed: int) -> np.ndarray:
    rng = SplitMix64(seed)
    pos = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.next() % (i + 1)
        pos[i], pos[j] = pos[j], pos[i]
    return np.array(pos, dtype=np.int64)


@dataclass(frozen=True)
class GroupSizes:
    sizes: tuple[int, ...]

    @property
    def cumulative(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.cumsum(self.sizes))

    @property
    def total(self) -> int:
        return sum(self.sizes)

    def __len__(self):
        return len(self.sizes)


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def power_cumulative(S: int, alpha: float, total: int) -> list[int]:
    """Unrepaired cumulative counts round(total * (i/S)**alpha), i = 1..S."""
    return [_round_half_away(total * (i / S) ** alpha) for i in range(1, S + 1)]


def group_sizes(S: int, alpha: float, total: int) -> GroupSizes:
    """Sizes of the S groups under the power schedule f(x) ~ x**alpha.

    Cumulative counts are rounded half away from zero, pushed up to stay
    strictly increasing, capped at ``total`` (and pulled down from the end so
    the last S - i steps still get a token each), then the differences are
    sorted ascending.
    """
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    if total < 1:
        raise ValueError(f"total must be >= 1, got {total}")
    if S > total:
        raise ValueError(f"cannot split {total} tokens into {S} non-empty groups")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    cum = power_cumulative(S, alpha, total)
    cum[-1] = total
    prev = 0
    for i in range(S):
        hi = total - (S - 1 - i)
        cum[i] = min(max(cum[i], prev + 1), hi)
        prev = cum[i]
    sizes = np.diff([0] + cum)
    return GroupSizes(tuple(int(s) for s in sorted(sizes)))


@dataclass(frozen=True)
class MaskSchedule:
    """Ordered partition of tile positions into groups.

    ``groups`` holds position arrays in the order they are coded. For the
    entropy kind the locations are data dependent, so ``groups`` is None and
    only the sizes are fixed; see ``entropy_next_mask``.
    """

    kind: str
    S: int
    alpha: float
    w_T: int
    seed: int
    sizes: GroupSizes
    groups: tuple[np.ndarray, ...] | None = field(default=None, compare=False)

    @property
    def n_positions(self) -> int:
        return self.w_T * self.w_T

    @property
    def is_adaptive(self) -> bool:
        return self.groups is None

    def masks(self) -> np.ndarray:
        """Binary (S, w_T**2) masks; M[i, j] = 1 iff position j is coded at step i."""
        if self.groups is None:
            raise ValueError("entropy schedules have no fixed masks")
        m = np.zeros((self.S, self.n_positions), dtype=np.uint8)
        for i, g in enumerate(self.groups):
            m[i, g] = 1
        return m

    def order(self) -> np.ndarray:
        if self.groups is None:
            raise ValueError("entropy schedules have no fixed order")
        return np.concatenate(self.groups)

    def __eq__(self, other):
        if not isinstance(other, MaskSchedule):
            return NotImplemented
        same = (self.kind, self.S, self.alpha, self.w_T, self.sizes) == (
            other.kind, other.S, other.alpha, other.w_T, other.sizes
        )
        if not same or (self.groups is None) != (other.groups is None):
            return False
        if self.groups is None:
            return True
        return all(np.array_equal(a, b) for a, b in zip(self.groups, other.groups))

    __hash__ = None  # type: ignore[assignment]


def split_order(order: np.ndarray, sizes: GroupSizes) -> tuple[np.ndarray, ...]:
    bounds = np.cumsum((0,) + sizes.sizes)
    return tuple(np.asarray(order[a:b], dtype=np.int64) for a, b in zip(bounds[:-1], bounds[1:]))


def make_schedule(kind: str, S: int, alpha: float, w_T: int, seed: int = 0) -> MaskSchedule:
    if kind not in KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    sizes = group_sizes(S, alpha, w_T * w_T)
    if kind == "entropy":
        return MaskSchedule(kind, S, float(alpha), w_T, seed, sizes, None)
    if kind == "random":
        order = seeded_permutation(w_T * w_T, seed)
    else:
        order = qlds_order(w_T).flat()
    return MaskSchedule(kind, S, float(alpha), w_T, seed, sizes, split_order(order, sizes))


def entropy_next_mask(entropies, remaining, k: int, support: tuple[int, int] | None = None) -> np.ndarray:
    """The k positions of ``remaining`` with the lowest entropy.

    ``entropies`` is either per-position entropies in bits (indexed by
    position, only entries in ``remaining`` are read) or a GmmParams of shape
    (w_T**2, c, N_M), in which case ``support`` is required and the entropy
    is that of the binned PMF. Ties go to the smaller position index. The
    result is in selection order (lowest entropy first).
    """
    from .gmm import GmmParams, token_entropy

    remaining = np.sort(np.asarray(remaining, dtype=np.int64))
    if k > remaining.size:
        raise ValueError(f"cannot select {k} of {remaining.size} remaining positions")
    if isinstance(entropies, GmmParams):
        if support is None:
            raise ValueError("support is required when selecting from mixture parameters")
        ent = token_entropy(entropies[remaining], support)
    else:
        ent = np.asarray(entropies, dtype=np.float64)[remaining]
    idx = np.argsort(ent, kind="stable")[:k]
    return remaining[idx]
