"""Tile and grid codecs for MT (full-length masked passes) and M2T
(group-causal incremental passes with a key/value cache).

Sender and receiver run the same model computations in the same order and
batch shapes, so their PMFs agree bit for bit and the range coder stays in
sync. For M2T the sender therefore also uses the cached incremental path; the
single teacher-forced pass (``net.m2t_forward``) gives the same parameters up
to float rounding and is what training and ``teacher_forced_nll`` use.

Bitstream layout (little-endian)::

    b"M2TB" | version u8 | h u32 | w u32 | c u32 | w_T u16 | S u16 |
    alpha_milli u32 | kind u8 | seed u64 | lo i16 | hi i16 | tile_count u32 |
    payload_len u32 * tile_count | payloads

The ``kind`` byte packs: bits 0-1 location rule (0 random, 1 entropy,
2 qlds), bit 2 path (0 MT, 1 M2T), bits 4-7 range-coder precision minus 8.
"""
from __future__ import annotations

import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .gmm import GmmParams, pmf_table, quantize_pmf, token_entropy
from .grid import TileSet, TokenGrid, tile, untile
from .layout import M2TLayout, build_layout
from .net import MaskedTransformer, m2t_forward, nll_m2t
from .rangecoder import RangeDecoder, RangeEncoder
from .sched import KINDS, MaskSchedule, entropy_next_mask, make_schedule

BITSTREAM_MAGIC = b"M2TB"
BITSTREAM_VERSION = 1
PATHS = ("mt", "m2t")
# tiles per model call; part of the format since it fixes the float computation
TILE_BATCH = 16
_HEAD = struct.Struct("<4sBIIIHHIBQhhI")


class BitstreamError(ValueError):
    """Malformed or inconsistent bitstream."""


@dataclass
class CodingStats:
    """Per-call instrumentation. Token counts are per tile."""

    tiles: int = 0
    tokens_in: list[int] = field(default_factory=list)
    probe_tokens: list[int] = field(default_factory=list)
    forward_passes: int = 0
    nll_bits: list[float] = field(default_factory=list)
    nll_bits_raw: list[float] = field(default_factory=list)
    coded_bits: list[int] = field(default_factory=list)
    seconds_model: float = 0.0
    seconds_coding: float = 0.0

    def merge(self, other: "CodingStats") -> "CodingStats":
        self.tiles += other.tiles
        self.tokens_in += other.tokens_in
        self.probe_tokens += other.probe_tokens
        self.forward_passes += other.forward_passes
        self.nll_bits += other.nll_bits
        self.nll_bits_raw += other.nll_bits_raw
        self.coded_bits += other.coded_bits
        self.seconds_model += other.seconds_model
        self.seconds_coding += other.seconds_coding
        return self

    @property
    def total_nll(self) -> float:
        return float(sum(self.nll_bits))

    @property
    def total_coded(self) -> int:
        return int(sum(self.coded_bits))


# -- shared step machinery -------------------------------------------------------

class _Channel:
    """Per-tile entropy coding endpoint: encoder (with known values) or decoder."""

    def __init__(self, lo: int, hi: int, precision: int, values=None, payload: bytes | None = None):
        self.lo, self.hi, self.precision = lo, hi, precision
        self.values = values
        self.nll = 0.0
        self.nll_raw = 0.0
        if values is not None:
            self.enc = RangeEncoder(precision)
        else:
            self.dec = RangeDecoder(payload, precision)

    def code(self, positions: np.ndarray, freqs: np.ndarray) -> np.ndarray:
        """Code the tokens at ``positions`` (k,) with tables (k * c, K); return their values (k, c)."""
        k = positions.size
        if self.values is not None:
            vals = self.values[positions]
            sym = (vals - self.lo).reshape(-1)
            if np.any(sym < 0) or np.any(sym >= freqs.shape[-1]):
                raise ValueError("token value outside the coded symbol range")
            self.enc.encode_many(sym, freqs)
            return vals
        return self.dec.decode_many(freqs).reshape(k, -1) + self.lo

    def finish(self):
        if self.values is not None:
            return self.enc.finish()
        self.dec.finish()
        return None


def _code_step(chans: list[_Channel], positions: np.ndarray, params: GmmParams, trace: list | None = None) -> np.ndarray:
    """Code one step for every tile: positions (B, k), params (B, k, c, N_M) -> values (B, k, c).

    The encoder also accumulates model NLL twice: under the PMF renormalized to
    the coded support (what the coder realizes) and under the raw binned PMF.
    """
    ch0 = chans[0]
    probs = pmf_table(params, ch0.lo, ch0.hi)
    B, k, c, K = probs.shape
    freqs = quantize_pmf(probs.reshape(B, k * c, K), ch0.precision)
    vals = np.stack([ch.code(positions[b], freqs[b]) for b, ch in enumerate(chans)])
    if trace is not None:
        trace.append((np.array(positions), params))
    if ch0.values is not None:
        p = np.take_along_axis(probs, (vals - ch0.lo)[..., None], axis=-1)[..., 0]
        raw = -np.log2(np.maximum(p, 1e-300))
        norm = raw + np.log2(probs.sum(-1))
        for ch, a, b in zip(chans, norm.reshape(B, -1).sum(-1).tolist(), raw.reshape(B, -1).sum(-1).tolist()):
            ch.nll += a
            ch.nll_raw += b
    return vals


def _check_model(model: MaskedTransformer, schedule: MaskSchedule, c: int):
    cfg = model.cfg
    if schedule.w_T != cfg.w_T:
        raise ValueError(f"schedule w_T={schedule.w_T} but model w_T={cfg.w_T}")
    if c != cfg.c:
        raise ValueError(f"tile has c={c} channels but model expects {cfg.c}")


@torch.no_grad()
def _run_mt(model: MaskedTransformer, chans: list[_Channel], schedule: MaskSchedule, c: int,
            trace: list | None = None) -> tuple[np.ndarray, CodingStats]:
    B, L = len(chans), schedule.n_positions
    stats = CodingStats(tiles=B)
    cur = np.zeros((B, L, c), dtype=np.int64)
    masked = np.ones((B, L), dtype=bool)
    positions = torch.arange(L)
    lo, hi = chans[0].lo, chans[0].hi
    for i, k in enumerate(schedule.sizes.sizes):
        t0 = time.perf_counter()
        params = model(torch.as_tensor(cur, dtype=model.dtype), torch.as_tensor(masked), positions).to_numpy()
        t1 = time.perf_counter()
        stats.forward_passes += 1
        if schedule.groups is not None:
            pos = np.broadcast_to(schedule.groups[i], (B, k))
        else:
            ent = token_entropy(params, (lo, hi))
            pos = np.stack([entropy_next_mask(ent[b], np.flatnonzero(masked[b]), k) for b in range(B)])
        rows = np.arange(B)[:, None]
        cur[rows, pos] = _code_step(chans, pos, params[rows, pos], trace)
        masked[rows, pos] = False
        stats.seconds_model += t1 - t0
        stats.seconds_coding += time.perf_counter() - t1
    stats.tokens_in = [schedule.S * L] * B
    stats.probe_tokens = [0] * B
    return cur, stats


@torch.no_grad()
def _run_m2t(model: MaskedTransformer, chans: list[_Channel], schedule: MaskSchedule, c: int,
             trace: list | None = None) -> tuple[np.ndarray, CodingStats]:
    B, L = len(chans), schedule.n_positions
    stats = CodingStats(tiles=B)
    cur = np.zeros((B, L, c), dtype=np.int64)
    remaining = np.ones((B, L), dtype=bool)
    lo, hi = chans[0].lo, chans[0].hi
    cache = model.new_cache()
    prev = np.zeros((B, 0), dtype=np.int64)
    probe = 0
    for i, k in enumerate(schedule.sizes.sizes):
        t0 = time.perf_counter()
        n_prev = prev.shape[1]
        if schedule.groups is not None:
            groups = np.broadcast_to(schedule.groups[i], (B, k))
        else:
            groups = _m2t_entropy_groups(model, cache, cur, prev, remaining, k, (lo, hi))
            probe += int(remaining[0].sum()) + n_prev
            stats.forward_passes += 1
        vals = np.zeros((B, k, c), dtype=np.int64)
        vals[:, :n_prev] = np.take_along_axis(cur, prev[..., None], axis=1)
        is_pad = np.zeros((B, k), dtype=bool)
        is_pad[:, n_prev:] = True
        slot_pos = np.concatenate([prev, groups[:, n_prev:]], axis=1)
        params = model(
            torch.as_tensor(vals, dtype=model.dtype), torch.as_tensor(is_pad), torch.as_tensor(slot_pos), None, cache
        ).to_numpy()
        t1 = time.perf_counter()
        stats.forward_passes += 1
        rows = np.arange(B)[:, None]
        cur[rows, groups] = _code_step(chans, groups, params, trace)
        remaining[rows, groups] = False
        prev = np.array(groups)
        stats.seconds_model += t1 - t0
        stats.seconds_coding += time.perf_counter() - t1
    stats.tokens_in = [L] * B
    stats.probe_tokens = [probe] * B
    return cur, stats


def _m2t_entropy_groups(model, cache, cur, prev, remaining, k, support) -> np.ndarray:
    """Pick each tile's next group by probing all remaining cells against the cache.

    The probe feeds the previous group's tokens plus one pad per remaining
    cell on a forked cache; the k lowest-entropy pad predictions win.
    """
    B, L, c = cur.shape
    n_prev = prev.shape[1]
    rem = np.stack([np.flatnonzero(r) for r in remaining])  # equal counts across tiles
    n_rem = rem.shape[1]
    vals = np.zeros((B, n_prev + n_rem, c), dtype=np.int64)
    vals[:, :n_prev] = np.take_along_axis(cur, prev[..., None], axis=1)
    is_pad = np.zeros((B, n_prev + n_rem), dtype=bool)
    is_pad[:, n_prev:] = True
    pos = np.concatenate([prev, rem], axis=1)
    params = model(
        torch.as_tensor(vals, dtype=model.dtype), torch.as_tensor(is_pad), torch.as_tensor(pos), None, cache.fork()
    ).to_numpy()
    ent = np.zeros((B, L))
    np.put_along_axis(ent, rem, token_entropy(params[:, n_prev:], support), axis=1)
    return np.stack([entropy_next_mask(ent[b], rem[b], k) for b in range(B)])


def _runner(path: str):
    if path == "mt":
        return _run_mt
    if path == "m2t":
        return _run_m2t
    raise ValueError(f"unknown path {path!r}; expected one of {PATHS}")


def _check_m2t_schedule(schedule: MaskSchedule):
    sizes = schedule.sizes.sizes
    if any(b < a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"M2T needs non-decreasing group sizes, got {sizes}")
    if schedule.alpha < 1:
        raise ValueError(f"M2T requires alpha >= 1, got {schedule.alpha}")


def _support(tiles: np.ndarray, support):
    if support is None:
        return int(tiles.min()), int(tiles.max())
    return int(support[0]), int(support[1])


# -- tile API --------------------------------------------------------------------

def encode_tiles(tiles, model: MaskedTransformer, schedule: MaskSchedule, path: str = "mt",
                 support=None, precision: int = 16) -> tuple[list[bytes], CodingStats]:
    """Encode a batch of tiles (B, w_T, w_T, c) or (B, L, c) in one model batch."""
    tiles = np.asarray(tiles)
    B = tiles.shape[0]
    flat = tiles.reshape(B, schedule.n_positions, -1).astype(np.int64)
    _check_model(model, schedule, flat.shape[-1])
    if path == "m2t":
        _check_m2t_schedule(schedule)
    lo, hi = _support(flat, support)
    chans = [_Channel(lo, hi, precision, values=t) for t in flat]
    _, stats = _runner(path)(model, chans, schedule, flat.shape[-1])
    payloads = [ch.finish() for ch in chans]
    stats.nll_bits = [ch.nll for ch in chans]
    stats.nll_bits_raw = [ch.nll_raw for ch in chans]
    stats.coded_bits = [8 * len(p) for p in payloads]
    return payloads, stats


def decode_tiles(payloads: list[bytes], model: MaskedTransformer, schedule: MaskSchedule, path: str = "mt",
                 support: tuple[int, int] = (0, 0), precision: int = 16,
                 trace: list | None = None) -> tuple[np.ndarray, CodingStats]:
    """Inverse of ``encode_tiles``; returns (B, L, c). ``support`` must match the encoder's.

    If ``trace`` is a list, each step appends (positions (B, k), params) as decoded.
    """
    c = model.cfg.c
    _check_model(model, schedule, c)
    if path == "m2t":
        _check_m2t_schedule(schedule)
    chans = [_Channel(support[0], support[1], precision, payload=p) for p in payloads]
    out, stats = _runner(path)(model, chans, schedule, c, trace)
    for ch in chans:
        ch.finish()
    stats.coded_bits = [8 * len(p) for p in payloads]
    return out, stats


def encode_tile_mt(tile_values, model, schedule, support=None, precision: int = 16) -> bytes:
    return encode_tiles(np.asarray(tile_values)[None], model, schedule, "mt", support, precision)[0][0]


def decode_tile_mt(data: bytes, model, schedule, support, precision: int = 16) -> np.ndarray:
    out = decode_tiles([data], model, schedule, "mt", support, precision)[0][0]
    return out.reshape(schedule.w_T, schedule.w_T, -1)


def encode_tile_m2t(tile_values, model, schedule, support=None, precision: int = 16) -> bytes:
    return encode_tiles(np.asarray(tile_values)[None], model, schedule, "m2t", support, precision)[0][0]


def decode_tile_m2t(data: bytes, model, schedule, support, precision: int = 16) -> np.ndarray:
    out = decode_tiles([data], model, schedule, "m2t", support, precision)[0][0]
    return out.reshape(schedule.w_T, schedule.w_T, -1)


@torch.no_grad()
def teacher_forced_nll(tile_values, model: MaskedTransformer, layout: M2TLayout) -> float:
    """Bits of one tile under the teacher-forced parameters of a single block-masked pass."""
    flat = np.asarray(tile_values).reshape(1, layout.length, -1)
    params = m2t_forward(model, torch.as_tensor(flat, dtype=model.dtype), layout).to_numpy()
    return nll_m2t(flat, layout, params)


# -- bitstream -----------------------------------------------------------------------

def pack_kind(kind: str, path: str, precision: int) -> int:
    if not 8 <= precision <= 16:
        raise ValueError(f"precision must be in [8, 16], got {precision}")
    return KINDS.index(kind) | (PATHS.index(path) << 2) | ((precision - 8) << 4)


def unpack_kind(byte: int) -> tuple[str, str, int]:
    k, p, prec = byte & 0b11, (byte >> 2) & 1, (byte >> 4) + 8
    if k >= len(KINDS) or byte & 0b1000 or prec > 16:
        raise BitstreamError(f"invalid kind byte {byte:#04x}")
    return KINDS[k], PATHS[p], prec


@dataclass
class Bitstream:
    h: int
    w: int
    c: int
    w_T: int
    S: int
    alpha_milli: int
    kind: str
    path: str
    precision: int
    seed: int
    lo: int
    hi: int
    payloads: list[bytes]
    stats: CodingStats | None = field(default=None, compare=False, repr=False)

    @property
    def alpha(self) -> float:
        return self.alpha_milli / 1000.0

    @property
    def tile_count(self) -> int:
        return len(self.payloads)

    @property
    def payload_bits(self) -> int:
        return 8 * sum(len(p) for p in self.payloads)

    def schedule(self) -> MaskSchedule:
        return make_schedule(self.kind, self.S, self.alpha, self.w_T, self.seed)

    def to_bytes(self) -> bytes:
        head = _HEAD.pack(
            BITSTREAM_MAGIC, BITSTREAM_VERSION, self.h, self.w, self.c, self.w_T, self.S, self.alpha_milli,
            pack_kind(self.kind, self.path, self.precision), self.seed, self.lo, self.hi, len(self.payloads),
        )
        lens = struct.pack(f"<{len(self.payloads)}I", *(len(p) for p in self.payloads))
        return head + lens + b"".join(self.payloads)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEAD.size:
            raise BitstreamError("truncated bitstream header")
        (magic, version, h, w, c, w_T, S, alpha_milli, kind_byte, seed, lo, hi, n) = _HEAD.unpack_from(data)
        if magic != BITSTREAM_MAGIC:
            raise BitstreamError(f"bad magic {magic!r}, expected {BITSTREAM_MAGIC!r}")
        if version != BITSTREAM_VERSION:
            raise BitstreamError(f"unsupported bitstream version {version}")
        kind, path, precision = unpack_kind(kind_byte)
        if min(h, w, c, w_T, S) < 1 or lo > hi:
            raise BitstreamError("inconsistent header fields")
        expected = -(-h // w_T) * -(-w // w_T)
        if n != expected:
            raise BitstreamError(f"tile count {n} does not match {h}x{w} at w_T={w_T} ({expected})")
        off = _HEAD.size
        if len(data) < off + 4 * n:
            raise BitstreamError("truncated payload length table")
        lens = struct.unpack_from(f"<{n}I", data, off)
        off += 4 * n
        if len(data) != off + sum(lens):
            raise BitstreamError(f"payload size mismatch: header says {sum(lens)}, have {len(data) - off}")
        payloads = []
        for ln in lens:
            payloads.append(bytes(data[off : off + ln]))
            off += ln
        return cls(h, w, c, w_T, S, alpha_milli, kind, path, precision, seed, lo, hi, payloads)


def _chunks(n: int):
    return [(a, min(a + TILE_BATCH, n)) for a in range(0, n, TILE_BATCH)]


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def encode_grid(grid: TokenGrid, model: MaskedTransformer, kind: str = "qlds", S: int = 12, alpha: float = 2.2,
                seed: int = 0, path: str = "mt", precision: int = 16, threads: int = 1) -> Bitstream:
    """Tile, code every tile independently, and assemble the bitstream.

    ``alpha`` is rounded to the header's milli-units before building the
    schedule so both sides use the same value. The returned bitstream carries
    ``stats`` with per-tile coded bits and model NLL.
    """
    if path not in PATHS:
        raise ValueError(f"unknown path {path!r}; expected one of {PATHS}")
    w_T = model.cfg.w_T
    alpha_milli = int(round(alpha * 1000))
    schedule = make_schedule(kind, S, alpha_milli / 1000.0, w_T, seed)
    lo, hi = grid.ymin, grid.ymax
    if lo < -(2**15) or hi > 2**15 - 1:
        raise ValueError("token values exceed the int16 header range")
    # padding must stay inside the coded symbol range; the receiver discards it
    ts = tile(grid, w_T, fill=min(max(0, lo), hi))
    flat = ts.flat()

    def work(span):
        return encode_tiles(flat[span[0] : span[1]], model, schedule, path, (lo, hi), precision)

    results = _map(work, _chunks(ts.tile_count), threads)
    payloads, stats = [], CodingStats()
    for p, s in results:
        payloads += p
        stats.merge(s)
    return Bitstream(grid.h, grid.w, grid.c, w_T, S, alpha_milli, kind, path, precision, seed, lo, hi, payloads, stats)


def decode_grid(bitstream: Bitstream | bytes, model: MaskedTransformer, threads: int = 1) -> TokenGrid:
    return decode_grid_with_stats(bitstream, model, threads)[0]


def decode_grid_with_stats(bitstream: Bitstream | bytes, model: MaskedTransformer,
                           threads: int = 1) -> tuple[TokenGrid, CodingStats]:
    bs = Bitstream.from_bytes(bitstream) if isinstance(bitstream, (bytes, bytearray)) else bitstream
    if bs.w_T != model.cfg.w_T or bs.c != model.cfg.c:
        raise BitstreamError(
            f"bitstream (w_T={bs.w_T}, c={bs.c}) does not match model (w_T={model.cfg.w_T}, c={model.cfg.c})"
        )
    schedule = bs.schedule()

    def work(span):
        return decode_tiles(bs.payloads[span[0] : span[1]], model, schedule, bs.path, (bs.lo, bs.hi), bs.precision)

    results = _map(work, _chunks(bs.tile_count), threads)
    flat = np.concatenate([r[0] for r in results], axis=0)
    stats = CodingStats()
    for _, s in results:
        stats.merge(s)
    tiles = flat.reshape(bs.tile_count, bs.w_T, bs.w_T, bs.c)
    return untile(TileSet(tiles, bs.h, bs.w, bs.w_T)), stats
