"""Bit-packed {0,1} vectors and the popcount primitives of the forward pass.

Bits pack LSB-first into uint64 words (bit i of a row lives in word i // 64,
position i % 64). Padding bits in the last word are always zero, so popcounts
over whole words never see phantom bits. Activations encode +1 as bit 1 and
-1 as bit 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .binquant import ValidationError


def words_needed(nbits: int) -> int:
    return (nbits + 63) // 64


def _pack_array(bits: np.ndarray) -> np.ndarray:
    """Pack the last axis of a {0,1} uint8 array into uint64 words."""
    nbits = bits.shape[-1]
    nwords = words_needed(nbits)
    if nbits == 0:
        return np.zeros(bits.shape[:-1] + (0,), dtype=np.uint64)
    packed8 = np.packbits(bits, axis=-1, bitorder="little")
    pad = nwords * 8 - packed8.shape[-1]
    if pad:
        packed8 = np.concatenate(
            [packed8, np.zeros(bits.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1
        )
    return np.ascontiguousarray(packed8).view(np.uint64)


def _unpack_array(words: np.ndarray, nbits: int) -> np.ndarray:
    if nbits == 0:
        return np.zeros(words.shape[:-1] + (0,), dtype=np.uint8)
    as8 = np.ascontiguousarray(words).view(np.uint8)
    bits = np.unpackbits(as8, axis=-1, bitorder="little")
    return bits[..., :nbits]


@dataclass(frozen=True)
class PackedBits:
    """One bit vector (or a stack of equal-length rows) in packed form."""

    words: np.ndarray  # uint64, shape (nwords,) or (rows, nwords)
    length: int  # logical bits per row

    def __post_init__(self):
        if self.words.dtype != np.uint64:
            raise ValidationError("packed words must be uint64")
        if self.words.shape[-1] != words_needed(self.length):
            raise ValidationError("word count does not match logical length")

    @property
    def rows(self) -> int:
        return 1 if self.words.ndim == 1 else self.words.shape[0]

    def unpack(self) -> np.ndarray:
        return _unpack_array(self.words, self.length)

    def popcount(self):
        """Set bits per row (int for 1-D, int64 array for 2-D)."""
        if self.words.ndim == 1:
            return _kernels.popcount_words(self.words)
        return _kernels.popcount_rows(np.ascontiguousarray(self.words))


def pack(bits) -> PackedBits:
    """Pack a {0,1} vector (or row-stack) into words; round-trip exact."""
    arr = np.asarray(bits)
    if arr.ndim not in (1, 2):
        raise ValidationError("pack expects a 1-D or 2-D bit array")
    if arr.size and (int(arr.min()) < 0 or int(arr.max()) > 1):
        raise ValidationError("entries must be in {0, 1}")
    arr = arr.astype(np.uint8)
    return PackedBits(words=_pack_array(arr), length=arr.shape[-1])


def pack_signs(signs) -> PackedBits:
    """Pack a {-1,+1} activation vector: +1 -> bit 1, -1 -> bit 0."""
    arr = np.asarray(signs)
    return pack((arr > 0).astype(np.uint8))


def popcount_dot(x_bits: PackedBits, w_bits: PackedBits) -> int:
    """Sum of activation signs over the weight's 1-bit positions:

        sum_{i in S1} x_i = 2 * popcount(x & w) - popcount(w)

    with x encoding +1 as bit 1. Both vectors must be 1-D and equal length.
    """
    if x_bits.length != w_bits.length:
        raise ValidationError(
            f"length mismatch: {x_bits.length} vs {w_bits.length}"
        )
    if x_bits.words.ndim != 1 or w_bits.words.ndim != 1:
        raise ValidationError("popcount_dot expects single rows")
    both = _kernels.popcount_words(x_bits.words & w_bits.words)
    return 2 * both - _kernels.popcount_words(w_bits.words)


def q_compute(x_bits: PackedBits):
    """Per-row activation sum q = sum x_i = 2 * popcount(x) - |x|. Computed
    once per input row and reused by every output channel."""
    pc = x_bits.popcount()
    if x_bits.words.ndim == 1:
        return 2 * pc - x_bits.length
    return (2 * pc - x_bits.length).astype(np.int64)
