"""Static-model range coder with 16-bit probabilities.

The coder keeps a 64-bit ``low`` register with byte-wise renormalisation and
carry propagation through a cached byte (the scheme popularised by LZMA).
Tables are never transmitted: both sides rebuild identical integer CDFs from
the entropy model.
"""
import bisect
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, CorruptionError, DesyncError

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


@dataclass
class CdfTable:
    """Cumulative counts, length ``alphabet + 1``, from 0 to exactly 2**16.

    ``cum`` may also be 2-D (one table per row) for batched coding.
    """

    cum: np.ndarray
    offset: int = 0

    @property
    def alphabet(self):
        return self.cum.shape[-1] - 1

    def freq(self):
        return np.diff(self.cum, axis=-1)

    def row(self, i):
        return CdfTable(self.cum[i], self.offset)


@dataclass
class Payload:
    data: bytes
    count: int
    crc: int

    @classmethod
    def wrap(cls, data, count):
        return cls(bytes(data), count, zlib.crc32(data) & _MASK32)

    def verify(self):
        if zlib.crc32(self.data) & _MASK32 != self.crc:
            raise CorruptionError("payload checksum mismatch")


def quantize_cdf(pmf, offset=0):
    """Apportion 2**16 counts to a pmf (or a stack of pmfs, one per row).

    Every symbol first receives one count; the remaining counts are split by
    largest remainder of ``p * (2**16 - A)`` with ties broken by index order.
    """
    p = np.asarray(pmf, dtype=np.float64)
    one_d = p.ndim == 1
    p = np.atleast_2d(p)
    A = p.shape[1]
    if A > TOTAL:
        raise CapacityError(f"alphabet of {A} symbols exceeds {TOTAL} counts")
    if np.any(p < 0) or np.any(~np.isfinite(p)):
        raise ValueError("pmf entries must be finite and non-negative")
    s = p.sum(axis=1, keepdims=True)
    if np.any(np.abs(s - 1.0) > 1e-6):
        raise ValueError("pmf is not normalized within 1e-6")
    free = TOTAL - A
    ideal = p / s * free
    base = np.floor(ideal)
    frac = ideal - base
    remaining = (free - base.sum(axis=1)).astype(np.int64)
    order = np.argsort(-frac, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(A)[None, :].repeat(len(p), 0), axis=1)
    counts = 1 + base.astype(np.int64) + (rank < remaining[:, None])
    cum = np.zeros((len(p), A + 1), dtype=np.int64)
    np.cumsum(counts, axis=1, out=cum[:, 1:])
    return CdfTable(cum[0] if one_d else cum, offset)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self.count = 0

    def _shift_low(self):
        low = self.low
        if (low & _MASK32) < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, start, size):
        if size <= 0:
            raise ValueError("cannot encode a zero-frequency symbol")
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * size
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()
        self.count += 1

    def finish(self):
        if self.count == 0:
            return b""
        for _ in range(5):
            self._shift_low()
        # the very first byte is always the zero initial cache
        assert self.out[0] == 0
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self):
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
        self.pos += 1
        return b

    def decode(self, cum, index=0):
        """Decode one symbol index against cumulative list ``cum``."""
        r = self.range >> PRECISION
        v = self.code // r
        if v >= TOTAL:
            raise DesyncError(index)
        s = bisect.bisect_right(cum, v) - 1
        start = cum[s]
        self.code -= r * start
        self.range = r * (cum[s + 1] - start)
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range <<= 8
        return s


def _table_rows(tables):
    if isinstance(tables, CdfTable):
        cum = tables.cum
        if cum.ndim == 1:
            raise TypeError("a single 1-D table needs a symbol count; pass a list of tables")
        rows = cum.tolist()
        return rows, [tables.offset] * len(rows)
    rows, offsets = [], []
    for t in tables:
        rows.append(t.cum.tolist())
        offsets.append(t.offset)
    return rows, offsets


def rc_encode(symbols, tables=None):
    """Encode symbols against their tables.

    Accepts either an iterable of ``(symbol, CdfTable)`` pairs, or a symbol
    array plus a 2-D :class:`CdfTable` (one row per symbol).
    """
    if tables is None:
        pairs = list(symbols)
        syms = [s for s, _ in pairs]
        rows, offsets = _table_rows([t for _, t in pairs])
    else:
        syms = np.asarray(symbols).reshape(-1).tolist()
        rows, offsets = _table_rows(tables)
    if len(syms) != len(rows):
        raise ValueError(f"{len(syms)} symbols but {len(rows)} tables")
    enc = RangeEncoder()
    for i, (s, cum, off) in enumerate(zip(syms, rows, offsets)):
        k = int(s) - off
        if not 0 <= k < len(cum) - 1:
            raise ValueError(f"symbol {s} at index {i} outside table alphabet")
        enc.encode(cum[k], cum[k + 1] - cum[k])
    return Payload.wrap(enc.finish(), len(syms))


def rc_decode(payload, tables, n=None):
    """Inverse of :func:`rc_encode`; verifies the checksum before decoding."""
    payload.verify()
    rows, offsets = _table_rows(tables)
    n = len(rows) if n is None else n
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if len(rows) < n:
        raise ValueError(f"{n} symbols requested but only {len(rows)} tables")
    dec = RangeDecoder(payload.data)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i] = dec.decode(rows[i], i) + offsets[i]
    if dec.pos > len(payload.data):
        raise DesyncError(n - 1, "decoder consumed past the end of the payload")
    return out


def ideal_bits(symbols, tables):
    """Sum of -log2 of the quantized probabilities of the given symbols."""
    cum = tables.cum if tables.cum.ndim == 2 else tables.cum[None]
    k = np.asarray(symbols).reshape(-1) - tables.offset
    idx = np.arange(len(k))
    freq = cum[idx, k + 1] - cum[idx, k]
    return float(-np.log2(freq / TOTAL).sum())
