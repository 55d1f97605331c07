"""Binary range coder driven by externally supplied probabilities.

32-bit range, byte-wise renormalisation and carry propagation through a
cached byte (the scheme used by LZMA's range coder). Probabilities are
quantised to 16 bits identically on both sides. The symbol ``1`` owns the
lower sub-interval ``[0, range * p1 >> 16)``.

The leading byte an LZMA-style encoder always emits is zero and is dropped
from the payload; the decoder starts as if it had read it.
"""

from __future__ import annotations

import numpy as np

from .errors import CorruptBitstreamError

PROB_BITS = 16
PROB_ONE = 1 << PROB_BITS
P_MIN = 2.0 ** -15
TOP = 1 << 24
MASK32 = 0xFFFFFFFF


def quantize(p1: float) -> int:
    """16-bit fixed point probability of a one bit, kept away from 0 and 1."""
    q = int(round(p1 * PROB_ONE))
    return min(max(q, 1), PROB_ONE - 1)


def quantize_array(p1: np.ndarray) -> np.ndarray:
    q = np.rint(np.asarray(p1, dtype=np.float64) * PROB_ONE).astype(np.int64)
    return np.clip(q, 1, PROB_ONE - 1)


def check_probability(p1) -> None:
    p = np.asarray(p1, dtype=np.float64)
    if p.size and (not np.all(np.isfinite(p)) or p.min() < P_MIN or p.max() > 1.0 - P_MIN):
        raise ValueError(f"probability outside [{P_MIN}, {1 - P_MIN}]")


def ideal_codelength(p1, bits) -> float:
    """Sum of -log2 p(observed bit) in bits."""
    p1 = np.asarray(p1, dtype=np.float64)
    bits = np.asarray(bits)
    p = np.where(bits.astype(bool), p1, 1.0 - p1)
    return float(-np.log2(p).sum())


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()
        self.n_bits = 0

    def _shift_low(self) -> None:
        low = self.low
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (low << 8) & MASK32

    def encode_bit(self, p1: float, bit: int) -> None:
        check_probability(p1)
        self.encode_quantized(quantize(p1), bit)

    def encode_quantized(self, q1: int, bit: int) -> None:
        bound = (self.range * q1) >> PROB_BITS
        if bit:
            self.range = bound
        else:
            self.low += bound
            self.range -= bound
        self.n_bits += 1
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, p1: np.ndarray, bits: np.ndarray) -> None:
        """Code a whole sequence; same result as repeated :meth:`encode_bit`."""
        check_probability(p1)
        q = quantize_array(p1).tolist()
        b = np.asarray(bits, dtype=np.int64).tolist()
        if len(q) != len(b):
            raise ValueError("probability and bit sequences differ in length")
        rng, low = self.range, self.low
        shift = self._shift_low
        for q1, bit in zip(q, b):
            bound = (rng * q1) >> 16
            if bit:
                rng = bound
            else:
                low += bound
                rng -= bound
            while rng < TOP:
                rng <<= 8
                self.low = low
                shift()
                low = self.low
        self.range, self.low = rng, low
        self.n_bits += len(q)

    def finish(self) -> bytes:
        """Flush the accumulator and return the standalone payload."""
        for _ in range(5):
            self._shift_low()
        return bytes(self._out[1:])


class RangeDecoder:
    def __init__(self, payload: bytes):
        self._buf = bytes(payload)
        self._pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()
        if self.code >= self.range:
            raise CorruptBitstreamError("payload start is not a valid code value")

    def _next(self) -> int:
        if self._pos >= len(self._buf):
            raise CorruptBitstreamError(f"payload exhausted after {len(self._buf)} bytes")
        b = self._buf[self._pos]
        self._pos += 1
        return b

    def decode_bit(self, p1: float) -> int:
        check_probability(p1)
        return self.decode_quantized(quantize(p1))

    def decode_quantized(self, q1: int) -> int:
        bound = (self.range * q1) >> PROB_BITS
        if self.code < bound:
            self.range = bound
            bit = 1
        else:
            self.code -= bound
            self.range -= bound
            bit = 0
        while self.range < TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next()) & MASK32
        return bit

    def decode_bits(self, p1: np.ndarray) -> np.ndarray:
        check_probability(p1)
        return np.array([self.decode_quantized(q) for q in quantize_array(p1).tolist()], dtype=np.uint8)

    @property
    def consumed(self) -> int:
        return self._pos

    def at_end(self) -> bool:
        return self._pos == len(self._buf)


def encode(p1, bits) -> bytes:
    enc = RangeEncoder()
    enc.encode_bits(np.asarray(p1, dtype=np.float64), np.asarray(bits))
    return enc.finish()


def decode(payload: bytes, p1) -> np.ndarray:
    return RangeDecoder(payload).decode_bits(np.asarray(p1, dtype=np.float64))


def payload_bits(payload: bytes) -> int:
    return 8 * len(payload)


def overhead_bound_bits() -> int:
    """Worst-case payload bits above the ideal codelength (flush plus final partial byte)."""
    return 32 + 8


__all__ = [
    "P_MIN", "PROB_BITS", "RangeDecoder", "RangeEncoder", "check_probability", "decode",
    "encode", "ideal_codelength", "overhead_bound_bits", "payload_bits", "quantize",
    "quantize_array",
]
