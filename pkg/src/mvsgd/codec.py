"""Bit-exact wire encodings.

Mask stream
    The index range is cut into blocks of ``block_size`` positions. For every
    block, in order, each selected position emits a ``1`` followed by its
    intra-block offset in ``block_bits`` bits (MSB first, ascending offsets),
    then the block is closed by a single ``0``. Cost:
    ``|mask| * (block_bits + 1) + ceil(dim / block_size)`` bits.

Value streams
    Raw values are IEEE-754 binary32, big-endian. Quantized values are
    ``count`` codes of ``q`` bits (sign bit, 0 = +, then the interval index
    ``l - 1`` in ``q - 1`` bits) followed by ``L = 2**(q-1)`` binary32 means.

All streams pack most-significant-bit first.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CorruptStream, DegenerateInput, InvalidArgument
from .sparsify import SparseMask
from .tensor_core import as_dense

MEAN_BITS = 32
RAW_VALUE_BITS = 32


class BitStream:
    """Append-only bit sequence. Bits are kept unpacked (one uint8 per bit)."""

    def __init__(self, bits=None):
        self._chunks: list[np.ndarray] = []
        self.bit_len = 0
        if bits is not None:
            self.write_bits(bits)

    def write(self, value: int, nbits: int):
        if nbits < 0 or value < 0 or (nbits < 64 and value >> nbits):
            raise InvalidArgument(f"{value} does not fit in {nbits} bits")
        self.write_bits(int_bits(np.array([value]), nbits).ravel())

    def write_bits(self, bits):
        arr = np.asarray(bits, dtype=np.uint8).ravel()
        if arr.size and arr.max() > 1:
            raise InvalidArgument("bits must be 0 or 1")
        if arr.size:
            self._chunks.append(arr)
            self.bit_len += arr.size

    def extend(self, other: BitStream):
        self.write_bits(other.bits)

    @property
    def bits(self) -> np.ndarray:
        if len(self._chunks) > 1:
            self._chunks = [np.concatenate(self._chunks)]
        if not self._chunks:
            return np.zeros(0, dtype=np.uint8)
        return self._chunks[0]

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, bit_len: int) -> BitStream:
        if not 0 <= bit_len <= 8 * len(data):
            raise CorruptStream(f"bit_len {bit_len} exceeds {8 * len(data)} available bits")
        return cls(np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:bit_len])

    def reader(self) -> BitReader:
        return BitReader(self)

    def to_str(self) -> str:
        return (self.bits + ord("0")).tobytes().decode("ascii")

    def __len__(self) -> int:
        return self.bit_len

    def __eq__(self, other) -> bool:
        return isinstance(other, BitStream) and np.array_equal(self.bits, other.bits)

    def __repr__(self) -> str:
        s = self.to_str()
        return f"BitStream({s[:64]}{'...' if len(s) > 64 else ''}, bit_len={self.bit_len})"


class BitReader:
    def __init__(self, stream: BitStream):
        self._bits = stream.bits
        self.bit_len = stream.bit_len
        self.cursor = 0

    @property
    def remaining(self) -> int:
        return self.bit_len - self.cursor

    def read_bits(self, n: int) -> np.ndarray:
        if n > self.remaining:
            raise CorruptStream(f"wanted {n} bits, only {self.remaining} left")
        out = self._bits[self.cursor : self.cursor + n]
        self.cursor += n
        return out

    def read(self, nbits: int) -> int:
        value = 0
        for b in self.read_bits(nbits).tolist():
            value = (value << 1) | b
        return value

    def peek_ascii(self) -> bytes:
        return (self._bits[self.cursor :] + ord("0")).tobytes()


def int_bits(values: np.ndarray, width: int) -> np.ndarray:
    """Fixed-width MSB-first binary expansion, shape ``(len(values), width)``."""
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    return ((np.asarray(values, dtype=np.uint64)[:, None] >> shifts) & 1).astype(np.uint8)


def bits_int(bits: np.ndarray) -> np.ndarray:
    """Inverse of :func:`int_bits` for a ``(n, width)`` array."""
    width = bits.shape[1]
    weights = (1 << np.arange(width - 1, -1, -1, dtype=np.int64))
    return bits.astype(np.int64) @ weights


# ---------------------------------------------------------------------------
# sparse positions

def block_params_for_ratio(phi: float) -> tuple[int, int]:
    """(block_bits, block_size) for sparsity ratio ``phi``: blocks of
    ``round(1/phi)`` positions addressed with ``ceil(log2(block_size))`` bits."""
    if not 0 < phi <= 1:
        raise InvalidArgument(f"phi={phi} not in (0, 1]")
    size = max(2, int(round(1.0 / phi)))
    return max(1, math.ceil(math.log2(size))), size


def _block_size(block_bits: int, block_size: int | None) -> int:
    if block_bits < 1:
        raise InvalidArgument("block_bits must be >= 1")
    B = 1 << block_bits if block_size is None else block_size
    if not 1 <= B <= 1 << block_bits:
        raise InvalidArgument(f"block_size {B} not addressable with {block_bits} bits")
    return B


def mask_stream_bits(n_selected: int, dim: int, block_bits: int, block_size: int | None = None) -> int:
    B = _block_size(block_bits, block_size)
    return n_selected * (block_bits + 1) + -(-dim // B)


def encode_mask(mask: SparseMask, block_bits: int, block_size: int | None = None,
                out: BitStream | None = None) -> BitStream:
    B = _block_size(block_bits, block_size)
    n_blocks = -(-mask.dim // B)
    idx = mask.indices
    blk, pos = np.divmod(idx, B)
    entry = block_bits + 1
    bits = np.zeros(idx.size * entry + n_blocks, dtype=np.uint8)
    # entry j sits after j earlier entries and blk[j] earlier terminators
    starts = np.arange(idx.size) * entry + blk
    bits[starts] = 1
    bits[starts[:, None] + 1 + np.arange(block_bits)] = int_bits(pos, block_bits)
    out = BitStream() if out is None else out
    out.write_bits(bits)
    return out


@lru_cache(maxsize=None)
def _entry_pattern(block_bits: int) -> re.Pattern:
    return re.compile(rb"1[01]{%d}" % block_bits)


def read_mask(reader: BitReader, dim: int, block_bits: int,
              block_size: int | None = None) -> SparseMask:
    """Decode one mask starting at the reader's cursor and advance past it."""
    B = _block_size(block_bits, block_size)
    n_blocks = -(-dim // B)
    if n_blocks == 0:
        return SparseMask(dim)
    # Scanning left to right, each entry collapses to b"2" while terminators
    # stay b"0", so token boundaries survive up to the last block terminator.
    tokens = np.frombuffer(_entry_pattern(block_bits).sub(b"2", reader.peek_ascii()), dtype=np.uint8)
    is_term = tokens == ord("0")
    term_at = np.flatnonzero(is_term)
    if term_at.size < n_blocks:
        raise CorruptStream("mask stream ended before the last block terminator")
    tokens = tokens[: term_at[n_blocks - 1] + 1]
    is_term = is_term[: tokens.size]
    is_entry = tokens == ord("2")
    if not np.all(is_entry | is_term):
        raise CorruptStream("truncated position field")
    lengths = np.where(is_entry, block_bits + 1, 1)
    starts = np.cumsum(lengths) - lengths
    field_bits = reader.read_bits(int(lengths.sum()))
    offsets = starts[is_entry][:, None] + 1 + np.arange(block_bits)
    pos = bits_int(field_bits[offsets]) if offsets.size else np.zeros(0, dtype=np.int64)
    idx = np.cumsum(is_term)[is_entry] * B + pos
    if idx.size:
        if pos.max() >= B or idx[-1] >= dim:
            raise CorruptStream("position outside its block or past dim")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise CorruptStream("positions not strictly ascending")
    return SparseMask(dim, idx)


def decode_mask(stream: BitStream, dim: int, block_bits: int,
                block_size: int | None = None) -> SparseMask:
    reader = stream.reader()
    mask = read_mask(reader, dim, block_bits, block_size)
    if reader.remaining:
        raise CorruptStream(f"{reader.remaining} trailing bits after the last block")
    return mask


# ---------------------------------------------------------------------------
# values

def encode_raw_values(values, out: BitStream | None = None) -> BitStream:
    be = np.asarray(values, dtype=">f4")
    out = BitStream() if out is None else out
    out.write_bits(np.unpackbits(be.view(np.uint8)))
    return out


def read_raw_values(reader: BitReader, count: int) -> np.ndarray:
    raw = np.packbits(reader.read_bits(count * RAW_VALUE_BITS))
    return raw.view(">f4").astype(np.float64)


@dataclass
class QuantizedBlock:
    """Fractional quantization of a value vector.

    ``levels`` holds the 1-based interval index of every value and ``signs``
    its sign bit (1 for negative). Interval ``l`` covers magnitudes in
    ``(v_max / alpha**l, v_max / alpha**(l-1)]``.
    """

    q: int
    signs: np.ndarray
    levels: np.ndarray
    means: np.ndarray
    v_max: float
    v_min: float

    @property
    def L(self) -> int:
        return 1 << (self.q - 1)

    @property
    def count(self) -> int:
        return int(self.levels.shape[0])

    @property
    def alpha(self) -> float:
        return (self.v_max / self.v_min) ** (1.0 / self.L)

    @property
    def codes(self) -> BitStream:
        c = (self.signs.astype(np.int64) << (self.q - 1)) | (self.levels.astype(np.int64) - 1)
        return BitStream(int_bits(c, self.q))


def quantize_values(values, q: int) -> QuantizedBlock:
    """Assign every magnitude to one of ``2**(q-1)`` geometric intervals
    between the smallest and largest nonzero magnitude.

    Zeros take interval L with a + sign; they do not contribute to the means.
    ``q=1`` is the scaled-sign quantizer (one mean for everything).
    """
    if not 1 <= q <= 32:
        raise InvalidArgument(f"q={q} not in [1, 32]")
    v = as_dense(values)
    mag = np.abs(v)
    nz = mag > 0
    if not nz.any():
        raise DegenerateInput("all values are zero")
    L = 1 << (q - 1)
    v_max = float(mag[nz].max())
    v_min = float(mag[nz].min())
    levels = np.full(v.shape[0], L, dtype=np.int64)
    if v_max == v_min:
        levels[nz] = 1
    else:
        t = L * np.log(v_max / mag[nz]) / math.log(v_max / v_min)
        levels[nz] = np.clip(np.ceil(t), 1, L).astype(np.int64)
    lv = levels[nz] - 1
    m = mag[nz]
    counts = np.bincount(lv, minlength=L)
    sums = np.bincount(lv, weights=m, minlength=L)
    means = np.zeros(L)
    hit = counts > 0
    means[hit] = sums[hit] / counts[hit]
    # keep each mean inside the span of its members despite rounding in the sum
    lo = np.full(L, np.inf)
    hi = np.zeros(L)
    np.minimum.at(lo, lv, m)
    np.maximum.at(hi, lv, m)
    means[hit] = np.clip(means[hit], lo[hit], hi[hit])
    signs = (v < 0).astype(np.uint8)
    return QuantizedBlock(q, signs, levels, means, v_max, v_min)


def scaled_sign(values) -> QuantizedBlock:
    return quantize_values(values, 1)


def dequantize(block: QuantizedBlock) -> np.ndarray:
    if block.means.shape != (block.L,):
        raise CorruptStream("means table has the wrong length")
    if block.count and (block.levels.min() < 1 or block.levels.max() > block.L):
        raise CorruptStream("interval index out of range")
    mags = block.means[block.levels - 1]
    return np.where(block.signs == 1, -mags, mags)


def quantized_stream_bits(count: int, q: int) -> tuple[int, int]:
    """(code bits, means-table bits) of a quantized value message."""
    return count * q, (1 << (q - 1)) * MEAN_BITS


def encode_quantized(block: QuantizedBlock, out: BitStream | None = None) -> BitStream:
    out = BitStream() if out is None else out
    out.extend(block.codes)
    encode_raw_values(block.means, out)
    return out


def read_quantized(reader: BitReader, count: int, q: int) -> QuantizedBlock:
    codes = bits_int(reader.read_bits(count * q).reshape(count, q))
    means = read_raw_values(reader, 1 << (q - 1))
    signs = (codes >> (q - 1)).astype(np.uint8)
    levels = (codes & ((1 << (q - 1)) - 1)) + 1
    nonzero = means[means > 0]
    v_max = float(nonzero.max()) if nonzero.size else 0.0
    v_min = float(nonzero.min()) if nonzero.size else 0.0
    return QuantizedBlock(q, signs, levels, means, v_max, v_min)
