"""Token grids, tiling into square patches, and the binary grid file format.

Grid file layout (little-endian)::

    b"M2TG" | version u8 | h u32 | w u32 | c u32 | h*w*c int16 values (row-major h, w, c)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRID_MAGIC = b"M2TG"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sBIII")

INT16_MIN = -(2**15)
INT16_MAX = 2**15 - 1


class GridFormatError(ValueError):
    """Raised for malformed grid files or grids that cannot be serialized."""


@dataclass(frozen=True)
class TokenGrid:
    """Integer representation of shape (h, w, c); each (i, j) column is one token."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"token grid must have shape (h, w, c) with all dims >= 1, got {v.shape}")
        if not np.issubdtype(v.dtype, np.integer):
            if not np.all(np.equal(np.mod(v, 1), 0)):
                raise ValueError("token grid values must be integers")
        v = np.ascontiguousarray(v, dtype=np.int64)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    @property
    def c(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def ymin(self) -> int:
        return int(self.values.min())

    @property
    def ymax(self) -> int:
        return int(self.values.max())

    def __eq__(self, other):
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.values, other.values))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class TileSet:
    """Zero-padded w_T x w_T x c patches in row-major tile order, plus the source dims."""

    tiles: np.ndarray  # (n_tiles, w_T, w_T, c)
    h: int
    w: int
    w_T: int
    grid_rows: int = field(default=0)
    grid_cols: int = field(default=0)

    def __post_init__(self):
        if self.grid_rows == 0:
            object.__setattr__(self, "grid_rows", -(-self.h // self.w_T))
        if self.grid_cols == 0:
            object.__setattr__(self, "grid_cols", -(-self.w // self.w_T))

    @property
    def tile_count(self) -> int:
        return self.tiles.shape[0]

    @property
    def c(self) -> int:
        return self.tiles.shape[3]

    def flat(self) -> np.ndarray:
        """Tiles as token sequences, shape (n_tiles, w_T**2, c), raster order inside a tile."""
        n, t, _, c = self.tiles.shape
        return self.tiles.reshape(n, t * t, c)


def tile(grid: TokenGrid, w_T: int, fill: int = 0) -> TileSet:
    """Split into w_T x w_T tiles, row-major; partial tiles are padded with ``fill``."""
    if w_T < 1:
        raise ValueError(f"w_T must be >= 1, got {w_T}")
    rows = -(-grid.h // w_T)
    cols = -(-grid.w // w_T)
    padded = np.full((rows * w_T, cols * w_T, grid.c), fill, dtype=np.int64)
    padded[: grid.h, : grid.w] = grid.values
    tiles = (
        padded.reshape(rows, w_T, cols, w_T, grid.c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, w_T, w_T, grid.c)
    )
    return TileSet(np.ascontiguousarray(tiles), grid.h, grid.w, w_T, rows, cols)


def untile(tiles: TileSet) -> TokenGrid:
    t = np.asarray(tiles.tiles)
    w_T = tiles.w_T
    rows = -(-tiles.h // w_T)
    cols = -(-tiles.w // w_T)
    if t.ndim != 4 or t.shape[1:3] != (w_T, w_T):
        raise ValueError(f"tiles must have shape (n, {w_T}, {w_T}, c), got {t.shape}")
    if t.shape[0] != rows * cols:
        raise ValueError(
            f"tile count {t.shape[0]} inconsistent with grid {tiles.h}x{tiles.w} at w_T={w_T} "
            f"(expected {rows * cols})"
        )
    c = t.shape[3]
    full = t.reshape(rows, cols, w_T, w_T, c).transpose(0, 2, 1, 3, 4).reshape(rows * w_T, cols * w_T, c)
    return TokenGrid(full[: tiles.h, : tiles.w])


def grid_to_bytes(grid: TokenGrid) -> bytes:
    if grid.ymin < INT16_MIN or grid.ymax > INT16_MAX:
        raise GridFormatError(f"values outside int16 range: [{grid.ymin}, {grid.ymax}]")
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, grid.h, grid.w, grid.c)
    return header + grid.values.astype("<i2").tobytes()


def grid_from_bytes(data: bytes) -> TokenGrid:
    if len(data) < _HEADER.size:
        raise GridFormatError("truncated grid header")
    magic, version, h, w, c = _HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"bad magic {magic!r}, expected {GRID_MAGIC!r}")
    if version != GRID_VERSION:
        raise GridFormatError(f"unsupported grid version {version}")
    if min(h, w, c) < 1:
        raise GridFormatError(f"invalid grid dims {(h, w, c)}")
    n = h * w * c
    body = data[_HEADER.size :]
    if len(body) < 2 * n:
        raise GridFormatError(f"truncated grid payload: need {2 * n} bytes, got {len(body)}")
    if len(body) > 2 * n:
        raise GridFormatError(f"trailing bytes after grid payload ({len(body) - 2 * n})")
    values = np.frombuffer(body, dtype="<i2", count=n).reshape(h, w, c)
    return TokenGrid(values)


def write_grid(grid: TokenGrid, path) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def read_grid(path) -> TokenGrid:
    return grid_from_bytes(Path(path).read_bytes())
