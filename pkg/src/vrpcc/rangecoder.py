"""Integer range coder over static per-element frequency tables, and the bitstream format.

The coder is the byte-oriented carry-propagating design (32-bit range, 33-bit
low with a cached output byte). Frequencies total 2**16. Every table row covers
``2A + 1`` symbols centred on the rounded density location plus one escape
symbol; escaped values follow as a raw 16-bit field coded at uniform frequency.
"""
from __future__ import annotations

import struct
import zlib
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .entropy import FactorizedDensity, hard_quantize
from .pointset import NormalizationRecord

PRECISION = 16
TOTAL = 1 << PRECISION
ALPHABET_BOUND = 127
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
_RAW_OFFSET = 1 << 15


class BitstreamError(ValueError):
    """Malformed, truncated or corrupted compressed data."""


@dataclass(frozen=True)
class CdfTable:
    offsets: np.ndarray   # (rows,) integer centre of each row's alphabet
    cdf: np.ndarray       # (rows, 2A + 3) cumulative frequencies; 0 ... TOTAL
    bound: int

    @property
    def rows(self) -> int:
        return len(self.offsets)

    @property
    def escape(self) -> int:
        return 2 * self.bound + 1

    def freqs(self) -> np.ndarray:
        return np.diff(self.cdf, axis=1)

    def symbol_bits(self, symbols, rows=None) -> np.ndarray:
        """Ideal code length in bits of each symbol under its row."""
        symbols = np.asarray(symbols, dtype=np.int64)
        rows = np.arange(len(symbols)) if rows is None else np.asarray(rows)
        rel = symbols - self.offsets[rows]
        esc = np.abs(rel) > self.bound
        slot = np.where(esc, self.escape, rel + self.bound)
        f = self.freqs()[rows, slot]
        return np.log2(TOTAL / f) + np.where(esc, PRECISION, 0)


def build_cdf(model: FactorizedDensity, bound: int = ALPHABET_BOUND) -> CdfTable:
    """Quantize each row's pmf to integer frequencies summing to 2**16.

    Each slot gets ``1 + floor(p * (TOTAL - slots))``; the remainder goes to the
    most probable slot (lowest on ties), so every frequency is at least one.
    """
    if bound < 1:
        raise ValueError("alphabet bound must be >= 1")
    offsets = hard_quantize(model.loc).astype(np.int64)
    rel = np.arange(-bound, bound + 1)
    sym = offsets[:, None] + rel[None, :]
    rows = np.arange(model.latent)[:, None]
    pmf = model.interval_mass(sym - 0.5, sym + 0.5, rows)
    lo_tail = model.cdf(offsets - bound - 0.5)
    hi_tail = model.interval_mass(offsets + bound + 0.5, np.inf)
    p = np.concatenate([pmf, (lo_tail + hi_tail)[:, None]], axis=1)
    slots = p.shape[1]
    freq = 1 + np.floor(p * (TOTAL - slots)).astype(np.int64)
    peak = np.argmax(p, axis=1)
    freq[np.arange(len(freq)), peak] += TOTAL - freq.sum(axis=1)
    cdf = np.zeros((len(freq), slots + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return CdfTable(offsets, cdf, bound)


# --------------------------------------------------------------------------- #
# coder state machines

class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def encode(self, start: int, size: int) -> None:
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * size
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._byte()) & _MASK32

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise BitstreamError(f"truncated payload: read past byte {len(self.data)}")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self) -> int:
        self._r = self.range >> PRECISION
        value = self.code // self._r
        if value >= TOTAL:
            raise BitstreamError("corrupt payload: decoder state out of range")
        return value

    def consume(self, start: int, size: int) -> None:
        self.code -= start * self._r
        self.range = self._r * size
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range <<= 8


def encode_symbols(symbols, table: CdfTable, rows=None) -> bytes:
    """Range-code integer symbols; symbol ``j`` uses table row ``rows[j]`` (default ``j``)."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.size == 0:
        return b""
    rows = np.arange(len(symbols)) if rows is None else np.asarray(rows, dtype=np.int64)
    if len(rows) != len(symbols) or rows.max() >= table.rows:
        raise ValueError(f"encode_symbols: {len(symbols)} symbols need rows within a {table.rows}-row table")
    bound, esc = table.bound, table.escape
    enc = RangeEncoder()
    cdf = table.cdf
    rel = (symbols - table.offsets[rows]).tolist()
    for j, r in enumerate(rows.tolist()):
        s = rel[j]
        if -bound <= s <= bound:
            slot = s + bound
            enc.encode(int(cdf[r, slot]), int(cdf[r, slot + 1] - cdf[r, slot]))
        else:
            raw = int(symbols[j]) + _RAW_OFFSET
            if not 0 <= raw < TOTAL:
                raise ValueError(f"symbol {int(symbols[j])} outside the escapable 16-bit range")
            enc.encode(int(cdf[r, esc]), int(cdf[r, esc + 1] - cdf[r, esc]))
            enc.encode(raw, 1)
    return enc.finish()


def decode_symbols(payload: bytes, count: int, table: CdfTable, rows=None) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    rows = np.arange(count) if rows is None else np.asarray(rows, dtype=np.int64)
    if len(rows) != count or rows.max() >= table.rows:
        raise ValueError(f"decode_symbols: {count} symbols need rows within a {table.rows}-row table")
    dec = RangeDecoder(payload)
    bound, esc = table.bound, table.escape
    cache: dict[int, list[int]] = {}
    out = np.empty(count, dtype=np.int64)
    for j, r in enumerate(rows.tolist()):
        cum = cache.get(r)
        if cum is None:
            cum = cache[r] = table.cdf[r].tolist()
        value = dec.target()
        slot = bisect_right(cum, value) - 1
        dec.consume(cum[slot], cum[slot + 1] - cum[slot])
        if slot == esc:
            raw = dec.target()
            dec.consume(raw, 1)
            out[j] = raw - _RAW_OFFSET
        else:
            out[j] = int(table.offsets[r]) + slot - bound
    return out


# --------------------------------------------------------------------------- #
# container

MAGIC = b"VRPC"
VERSION = 1
_HEADER = struct.Struct("<4sBIHH4d8sI")
HEADER_SIZE = _HEADER.size + 4


@dataclass(frozen=True)
class Bitstream:
    n: int
    latent: int
    keep: int
    norm: NormalizationRecord
    model_hash: bytes
    payload: bytes

    def to_bytes(self) -> bytes:
        if len(self.model_hash) != 8:
            raise ValueError("model hash must be 8 bytes")
        head = _HEADER.pack(MAGIC, VERSION, self.n, self.latent, self.keep,
                            *self.norm.offset, self.norm.scale, self.model_hash, len(self.payload))
        return head + struct.pack("<I", zlib.crc32(head)) + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Bitstream":
        if len(raw) < HEADER_SIZE:
            raise BitstreamError(f"bitstream too short: {len(raw)} bytes, header needs {HEADER_SIZE}")
        head = raw[:_HEADER.size]
        magic, version, n, latent, keep, ox, oy, oz, scale, mhash, plen = _HEADER.unpack(head)
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        (crc,) = struct.unpack_from("<I", raw, _HEADER.size)
        if crc != zlib.crc32(head):
            raise BitstreamError("header CRC mismatch")
        if version != VERSION:
            raise BitstreamError(f"unsupported bitstream version {version}")
        payload = raw[HEADER_SIZE:]
        if len(payload) != plen:
            raise BitstreamError(f"payload length {len(payload)} != declared {plen}")
        if keep > latent:
            raise BitstreamError(f"kept length {keep} exceeds latent length {latent}")
        try:
            norm = NormalizationRecord((ox, oy, oz), scale)
        except ValueError as exc:
            raise BitstreamError(str(exc)) from None
        return cls(n, latent, keep, norm, mhash, payload)
