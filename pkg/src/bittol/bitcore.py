"""Bit-packed storage of ±1 values and the XNOR/popcount dot-product kernel.

Values are stored one bit per entry with the convention +1 -> bit 1 and
-1 -> bit 0, so that popcount(xnor(w, x)) counts the positions where the
two operands agree.  Rows are padded to 64-bit word boundaries; padding
bits are always zero and never influence a result.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

WORD_BITS = 64
# explicit little-endian words so the logical bit <-> storage mapping is
# host-independent (bit j of a row lives in word j//64, bit j%64)
WORD_DTYPE = np.dtype("<u8")


class BitMatrix:
    """Packed matrix of ±1 values, one bit per entry, row-major."""

    __slots__ = ("rows", "cols", "words")

    def __init__(self, rows: int, cols: int, words: np.ndarray):
        expected = (rows, word_count(cols))
        if words.shape != expected:
            raise ShapeError(f"word array shape {words.shape}, expected {expected}")
        self.rows = rows
        self.cols = cols
        self.words = words

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "BitMatrix":
        """Pack a (rows, cols) array of 0/1 values."""
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.ndim != 2:
            raise ShapeError(f"expected 2-d bit array, got ndim={bits.ndim}")
        rows, cols = bits.shape
        padded_cols = word_count(cols) * WORD_BITS
        padded = np.zeros((rows, padded_cols), dtype=np.uint8)
        padded[:, :cols] = bits
        words = np.packbits(padded, axis=1, bitorder="little").view(WORD_DTYPE)
        return cls(rows, cols, words)

    def to_bits(self) -> np.ndarray:
        """Unpack to a (rows, cols) uint8 array of 0/1 values."""
        as_bytes = self.words.view(np.uint8).reshape(self.rows, -1)
        bits = np.unpackbits(as_bytes, axis=1, bitorder="little")
        return bits[:, : self.cols]

    def row(self, i: int) -> np.ndarray:
        """Packed words of row i (a view, do not mutate)."""
        return self.words[i]

    def copy(self) -> "BitMatrix":
        return BitMatrix(self.rows, self.cols, self.words.copy())

    @property
    def shape(self) -> tuple:
        return (self.rows, self.cols)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BitMatrix)
            and self.shape == other.shape
            and np.array_equal(self.words, other.words)
        )

    def __repr__(self) -> str:
        return f"BitMatrix({self.rows}x{self.cols})"


# A flip mask has the same packed layout as the matrix it targets; 1-bits
# mark the positions to flip.
BitMask = BitMatrix


def word_count(cols: int) -> int:
    return (cols + WORD_BITS - 1) // WORD_BITS


def tail_mask(cols: int) -> np.uint64:
    """Mask selecting the logical bits of the last word of a row."""
    rem = cols % WORD_BITS
    if rem == 0:
        return np.uint64(0xFFFFFFFFFFFFFFFF)
    return np.uint64((1 << rem) - 1)


def pack_signs(values, rows: int, cols: int) -> BitMatrix:
    """Pack a flat sequence of ±1 values into a BitMatrix (+1 -> bit 1)."""
    arr = np.asarray(values)
    if arr.size != rows * cols:
        raise ShapeError(f"got {arr.size} values for a {rows}x{cols} matrix")
    bad = (arr != 1) & (arr != -1)
    if bad.any():
        raise ValueError(f"values must be +-1, found {arr.reshape(-1)[bad.reshape(-1)][0]}")
    bits = (arr.reshape(rows, cols) == 1).astype(np.uint8)
    return BitMatrix.from_bits(bits)


def unpack_signs(m: BitMatrix) -> np.ndarray:
    """Inverse of pack_signs: (rows, cols) int8 array of ±1."""
    return (m.to_bits().astype(np.int8) * 2 - 1)


def xnor_popcount_dot(w: np.ndarray, x: np.ndarray, nbits: int) -> int:
    """Binarized dot product of two packed rows.

    Returns 2 * popcount(xnor(w, x)) - nbits, which equals the dense ±1
    dot product of the rows' first `nbits` entries.
    """
    if w.shape != x.shape:
        raise ShapeError(f"row word counts differ: {w.shape} vs {x.shape}")
    if word_count(nbits) != w.shape[-1]:
        raise ShapeError(f"nbits={nbits} does not fit word count {w.shape[-1]}")
    agree = ~(w ^ x)
    agree[..., -1] &= tail_mask(nbits)
    return 2 * int(np.bitwise_count(agree).sum(dtype=np.int64)) - nbits


def xnor_popcount_matmul(a: BitMatrix, b: BitMatrix) -> np.ndarray:
    """All-pairs binarized dot products: out[i, j] = <a row i, b row j>.

    Same kernel as xnor_popcount_dot, run word-wise over every row pair.
    """
    if a.cols != b.cols:
        raise ShapeError(f"bit counts differ: {a.cols} vs {b.cols}")
    agree = ~(a.words[:, None, :] ^ b.words[None, :, :])
    agree[..., -1] &= tail_mask(a.cols)
    counts = np.bitwise_count(agree).sum(axis=2, dtype=np.int64)
    return 2 * counts - a.cols


def apply_mask_xor(m: BitMatrix, mask: BitMask) -> BitMatrix:
    """Flip the bits of `m` marked by 1-bits in `mask` (an involution)."""
    if m.shape != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match matrix {m.shape}")
    return BitMatrix(m.rows, m.cols, m.words ^ mask.words)
