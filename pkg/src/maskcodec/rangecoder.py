"""Byte-oriented range coder with carry propagation over integer frequency tables.

32-bit range, 33-bit low (the top bit is the pending carry), renormalising a
byte at a time whenever the range drops below 2**24. Frequency tables must sum
to exactly 2**precision with every entry >= 1 (see ``gmm.quantize_pmf``).
"""
from __future__ import annotations

import numpy as np

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
FLUSH_BYTES = 5


class RangeCoderError(ValueError):
    pass


class RangeEncoder:
    def __init__(self, precision: int = 16):
        self.precision = precision
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()
        self.n_symbols = 0

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            byte = self._cache
            while True:
                self._out.append((byte + carry) & 0xFF)
                byte = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (self.low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, start: int, freq: int):
        r = self.range >> self.precision
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()
        self.n_symbols += 1

    def encode_many(self, symbols, freqs: np.ndarray):
        """Encode symbol indices ``symbols[i]`` with table row ``freqs[i]``."""
        symbols = np.asarray(symbols, dtype=np.int64)
        freqs = np.asarray(freqs, dtype=np.int64)
        if symbols.size == 0:
            return
        n, k = freqs.shape
        if np.any(symbols < 0) or np.any(symbols >= k):
            raise RangeCoderError("symbol outside table support")
        rows = np.arange(n)
        starts = (np.cumsum(freqs, axis=1) - freqs)[rows, symbols]
        for s, f in zip(starts.tolist(), freqs[rows, symbols].tolist()):
            self.encode(s, f)

    def finish(self) -> bytes:
        for _ in range(FLUSH_BYTES):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes, precision: int = 16):
        self.precision = precision
        self._data = data
        self._pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(FLUSH_BYTES):
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise RangeCoderError("range-coded stream is truncated")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode_cum(self, cum: np.ndarray) -> int:
        """Decode one symbol given the inclusive-prefix table [0, c1, ..., 2**precision]."""
        r = self.range >> self.precision
        value = min(self.code // r, (1 << self.precision) - 1)
        s = int(np.searchsorted(cum, value, side="right")) - 1
        lo = int(cum[s])
        self.code -= r * lo
        self.range = r * (int(cum[s + 1]) - lo)
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32
            self.range <<= 8
        return s

    def decode_many(self, freqs: np.ndarray) -> np.ndarray:
        freqs = np.asarray(freqs, dtype=np.int64)
        cum = np.concatenate([np.zeros((freqs.shape[0], 1), dtype=np.int64), np.cumsum(freqs, axis=1)], axis=1)
        return np.array([self.decode_cum(row) for row in cum], dtype=np.int64)

    def finish(self) -> None:
        """Check the whole stream was consumed."""
        if self._pos != len(self._data):
            raise RangeCoderError(f"{len(self._data) - self._pos} unread bytes after last symbol")


def rc_encode(symbols, freqs, precision: int = 16) -> bytes:
    enc = RangeEncoder(precision)
    enc.encode_many(symbols, np.asarray(freqs).reshape(len(symbols), -1) if len(symbols) else np.zeros((0, 1)))
    return enc.finish()


def rc_decode(data: bytes, freqs, precision: int, n: int) -> np.ndarray:
    dec = RangeDecoder(data, precision)
    out = dec.decode_many(np.asarray(freqs).reshape(n, -1)) if n else np.zeros(0, dtype=np.int64)
    dec.finish()
    return out


def ideal_bits(symbols, freqs, precision: int = 16) -> float:
    symbols = np.asarray(symbols, dtype=np.int64)
    freqs = np.asarray(freqs, dtype=np.int64)
    if symbols.size == 0:
        return 0.0
    f = freqs[np.arange(symbols.size), symbols]
    return float(np.sum(precision - np.log2(f)))
