import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bittol.bitcore import (
    BitMatrix,
    apply_mask_xor,
    pack_signs,
    tail_mask,
    unpack_signs,
    word_count,
    xnor_popcount_dot,
    xnor_popcount_matmul,
)
from bittol.errors import ShapeError


def test_pack_all_plus_one_sets_low_bits():
    m = pack_signs([1] * 8, 1, 8)
    assert m.words[0, 0] == 0xFF


def test_pack_all_minus_one_is_zero_word():
    m = pack_signs([-1] * 8, 1, 8)
    assert m.words[0, 0] == 0


def test_pack_unpack_alternating_round_trip():
    vals = [1, -1, 1, -1, 1, -1, 1, -1, 1]
    m = pack_signs(vals, 1, 9)
    assert unpack_signs(m).flatten().tolist() == vals


def test_pack_rejects_wrong_length():
    with pytest.raises(ShapeError):
        pack_signs([1, -1], 1, 3)


def test_pack_rejects_non_sign_values():
    with pytest.raises(ValueError):
        pack_signs([1, 0, -1], 1, 3)


def test_dot_perfect_agreement():
    w = pack_signs([1, -1] * 4, 1, 8)
    assert xnor_popcount_dot(w.row(0), w.row(0), 8) == 8


def test_dot_perfect_disagreement():
    w = pack_signs([1, -1] * 4, 1, 8)
    x = pack_signs([-1, 1] * 4, 1, 8)
    assert xnor_popcount_dot(w.row(0), x.row(0), 8) == -8


def test_dot_matches_dense_on_random_9bit_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = rng.integers(0, 2, 9) * 2 - 1
        b = rng.integers(0, 2, 9) * 2 - 1
        wa = pack_signs(a, 1, 9)
        wb = pack_signs(b, 1, 9)
        assert xnor_popcount_dot(wa.row(0), wb.row(0), 9) == int(a @ b)


def test_dot_rejects_width_mismatch():
    a = pack_signs([1] * 8, 1, 8)
    b = pack_signs([1] * 70, 1, 70)
    with pytest.raises(ShapeError):
        xnor_popcount_dot(a.row(0), b.row(0), 8)


@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
@settings(max_examples=150, deadline=None)
def test_dot_equals_dense_across_word_boundaries(nbits, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, nbits) * 2 - 1
    b = rng.integers(0, 2, nbits) * 2 - 1
    wa = pack_signs(a, 1, nbits)
    wb = pack_signs(b, 1, nbits)
    assert xnor_popcount_dot(wa.row(0), wb.row(0), nbits) == int(a @ b)


@given(st.integers(1, 130), st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_dot_result_has_fanin_parity_and_range(nbits, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, nbits) * 2 - 1
    b = rng.integers(0, 2, nbits) * 2 - 1
    r = xnor_popcount_dot(pack_signs(a, 1, nbits).row(0), pack_signs(b, 1, nbits).row(0), nbits)
    assert -nbits <= r <= nbits
    assert (r - nbits) % 2 == 0


def test_matmul_equals_rowwise_dots():
    rng = np.random.default_rng(3)
    a_bits = rng.integers(0, 2, (5, 70), dtype=np.uint8)
    b_bits = rng.integers(0, 2, (7, 70), dtype=np.uint8)
    a = BitMatrix.from_bits(a_bits)
    b = BitMatrix.from_bits(b_bits)
    out = xnor_popcount_matmul(a, b)
    for i in range(5):
        for j in range(7):
            assert out[i, j] == xnor_popcount_dot(a.row(i), b.row(j), 70)


def test_padding_bits_stay_zero_through_ops():
    rng = np.random.default_rng(4)
    bits = rng.integers(0, 2, (3, 67), dtype=np.uint8)
    m = BitMatrix.from_bits(bits)
    mask = BitMatrix.from_bits(rng.integers(0, 2, (3, 67), dtype=np.uint8))
    flipped = apply_mask_xor(m, mask)
    pad = ~tail_mask(67) & np.uint64(0xFFFFFFFFFFFFFFFF)
    assert word_count(67) == 2
    for mat in (m, mask, flipped):
        assert np.all(mat.words[:, -1] & pad == 0)


def test_apply_zero_mask_is_identity():
    rng = np.random.default_rng(5)
    m = BitMatrix.from_bits(rng.integers(0, 2, (2, 40), dtype=np.uint8))
    zero = BitMatrix.from_bits(np.zeros((2, 40), dtype=np.uint8))
    assert apply_mask_xor(m, zero) == m


def test_apply_full_mask_inverts_all_logical_bits():
    rng = np.random.default_rng(6)
    bits = rng.integers(0, 2, (2, 40), dtype=np.uint8)
    m = BitMatrix.from_bits(bits)
    full = BitMatrix.from_bits(np.ones((2, 40), dtype=np.uint8))
    assert np.array_equal(apply_mask_xor(m, full).to_bits(), 1 - bits)


@given(st.integers(1, 150), st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_mask_involution(cols, seed):
    rng = np.random.default_rng(seed)
    m = BitMatrix.from_bits(rng.integers(0, 2, (2, cols), dtype=np.uint8))
    k = BitMatrix.from_bits(rng.integers(0, 2, (2, cols), dtype=np.uint8))
    assert apply_mask_xor(apply_mask_xor(m, k), k) == m


def test_apply_mask_shape_mismatch_rejected():
    a = BitMatrix.from_bits(np.zeros((2, 8), dtype=np.uint8))
    b = BitMatrix.from_bits(np.zeros((2, 9), dtype=np.uint8))
    with pytest.raises(ShapeError):
        apply_mask_xor(a, b)
