import math
import os
import sys
import unittest

import numpy as np
from hypothesis import given, strategies as st

# Add the parent directory to the path so we can import our modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.autograd import Tensor
from core.bitstream import (BitMode, BitVector, QuantizerSpec, binarize, bits_for_bpd, bits_to_codeword,
                            bits_to_indices, budget, codeword_bits, codeword_to_bits, dequantize,
                            dequantize_indices, flip_bit_array, flip_bits, indices_to_bits, quantize,
                            quantize_indices, quantize_st)
from core.exceptions import FormatError, InvalidArgumentError
from utils.rng import keyed_rng

unit_floats = st.floats(min_value=-1.0, max_value=1.0, allow_nan=False)


class TestQuantizer(unittest.TestCase):
    """Test cases for uniform quantization and bit packing"""

    def test_edges_for_two_bits(self):
        np.testing.assert_array_equal(quantize_indices(np.array([-1.0, 1.0]), 2), [0, 3])
        np.testing.assert_allclose(dequantize_indices(np.array([0, 3]), 2), [-0.75, 0.75])

    def test_out_of_range_is_clamped(self):
        np.testing.assert_array_equal(quantize_indices(np.array([-7.0, 9.0]), 3), [0, 7])

    def test_error_bound_on_many_inputs(self):
        x = keyed_rng(0, 11).uniform(-1.0, 1.0, 10 ** 6)
        for bits in (1, 2, 4, 8):
            error = np.abs(dequantize_indices(quantize_indices(x, bits), bits) - x)
            self.assertLessEqual(float(error.max()), 2.0 ** -bits + 1e-12, bits)

    @given(st.lists(unit_floats, min_size=1, max_size=64), st.integers(min_value=1, max_value=16))
    def test_quantize_is_idempotent(self, values, bits):
        index = quantize_indices(np.array(values), bits)
        again = quantize_indices(dequantize_indices(index, bits), bits)
        np.testing.assert_array_equal(index, again)

    @given(st.lists(st.integers(min_value=0, max_value=2 ** 16 - 1), min_size=1, max_size=32),
           st.integers(min_value=1, max_value=16))
    def test_packing_recovers_indices(self, raw, bits):
        index = np.array(raw, dtype=np.int64) % (1 << bits)
        np.testing.assert_array_equal(bits_to_indices(indices_to_bits(index, bits), bits), index)

    def test_least_significant_bit_first(self):
        np.testing.assert_array_equal(indices_to_bits(np.array([1, 6]), 4), [1, 0, 0, 0, 0, 1, 1, 0])

    def test_bit_length_must_divide(self):
        with self.assertRaises(FormatError):
            bits_to_indices(np.zeros(7, dtype=np.uint8), 4)

    def test_bit_vector_codec(self):
        spec = QuantizerSpec(3)
        x = np.array([-0.9, -0.1, 0.2, 0.95, 1.0])
        packed = quantize(x, spec)
        self.assertEqual(len(packed), 15)
        restored = BitVector.from_bytes(packed.to_bytes())
        self.assertEqual(restored, packed)
        np.testing.assert_allclose(dequantize(restored, spec), dequantize_indices(quantize_indices(x, 3), 3))

    def test_bit_vector_rejects_bad_padding_and_truncation(self):
        with self.assertRaises(FormatError):
            BitVector(length=3, data=bytes([0b11111111]))
        with self.assertRaises(FormatError):
            BitVector.from_bytes((20).to_bytes(4, "little") + b"\x00")

    def test_spec_range(self):
        with self.assertRaises(InvalidArgumentError):
            QuantizerSpec(0)
        with self.assertRaises(InvalidArgumentError):
            QuantizerSpec(17)

    def test_straight_through_forward_matches_plain_quantizer(self):
        x = keyed_rng(0, 12).uniform(-1.0, 1.0, (6, 5))
        out = quantize_st(Tensor(x), 4)
        np.testing.assert_array_equal(out.data, dequantize_indices(quantize_indices(x, 4), 4))


class TestBinarizer(unittest.TestCase):
    """Test cases for stochastic binarization"""

    def test_boundaries_are_deterministic(self):
        rng = keyed_rng(0, 13)
        np.testing.assert_array_equal(binarize(np.ones(100), rng), np.ones(100))
        np.testing.assert_array_equal(binarize(-np.ones(100), rng), -np.ones(100))

    def test_unbiased_over_grid(self):
        draws = 10 ** 5
        for i, x in enumerate(np.linspace(-0.9, 0.9, 19)):
            values = binarize(np.full(draws, x), keyed_rng(1, i))
            self.assertTrue(set(np.unique(values)) <= {-1.0, 1.0})
            bound = 3.0 * math.sqrt((1.0 - x * x) / draws)
            self.assertLessEqual(abs(values.mean() - x), bound, x)

    def test_codeword_bits_follow_symbols(self):
        codeword = np.array([[1.0, -1.0, 1.0]])
        bits = codeword_to_bits(codeword, BitMode.BINARIZE, 1, keyed_rng(0))
        np.testing.assert_array_equal(bits, [[1, 0, 1]])
        np.testing.assert_array_equal(bits_to_codeword(bits, BitMode.BINARIZE, 1), codeword)
        with self.assertRaises(InvalidArgumentError):
            codeword_to_bits(codeword, BitMode.BINARIZE, 1, None)

    def test_codeword_width_accounting(self):
        self.assertEqual(codeword_bits(8, BitMode.QUANTIZE, 4), 32)
        self.assertEqual(codeword_bits(8, BitMode.BINARIZE, 4), 8)


class TestBitErrors(unittest.TestCase):
    """Test cases for feedback-link corruption"""

    def test_zero_and_full_error_rates(self):
        bits = keyed_rng(0, 14).integers(0, 2, 1000).astype(np.uint8)
        np.testing.assert_array_equal(flip_bit_array(bits, 0.0, keyed_rng(1)), bits)
        np.testing.assert_array_equal(flip_bit_array(bits, 1.0, keyed_rng(1)), 1 - bits)

    def test_flip_count_is_binomial(self):
        n = 10 ** 5
        flipped = flip_bit_array(np.zeros(n, dtype=np.uint8), 0.1, keyed_rng(2, 14))
        self.assertLessEqual(abs(int(flipped.sum()) - 10 ** 4), 3 * math.sqrt(n * 0.1 * 0.9))

    def test_bit_vector_flip(self):
        vector = BitVector.from_bits(np.zeros(13, dtype=np.uint8))
        self.assertEqual(flip_bits(vector, 1.0, keyed_rng(0)).to_bits().sum(), 13)

    def test_probability_range(self):
        with self.assertRaises(InvalidArgumentError):
            flip_bit_array(np.zeros(4, dtype=np.uint8), 1.5, keyed_rng(0))


class TestBudget(unittest.TestCase):
    """Test cases for bit budgets"""

    def test_budget_examples(self):
        self.assertEqual(budget(256, 1 / 32, 4).total_bits, 32)
        self.assertEqual(budget(256, 2.0, 1).bpd, 2.0)
        identity = budget(256, 1.0, 1, n_dims=256)
        self.assertEqual((identity.total_bits, identity.bpd), (256, 1.0))

    def test_non_integer_budget_rounds_down(self):
        result = budget(10, 0.25, 1)
        self.assertEqual(result.total_bits, 2)
        self.assertTrue(result.rounded_down)

    def test_invalid_budgets(self):
        with self.assertRaises(InvalidArgumentError):
            budget(0, 0.5, 1)
        with self.assertRaises(InvalidArgumentError):
            budget(4, 0.1, 1)
        with self.assertRaises(InvalidArgumentError):
            budget(32, 0.5, 1, mag_bits=17)

    def test_magnitude_phase_split(self):
        result = budget(32, 0.5, 1, mag_bits=12)
        self.assertEqual((result.mag_bits, result.phase_bits), (12, 4))

    def test_bits_for_bpd(self):
        self.assertEqual(bits_for_bpd(0.1, 1, 32, BitMode.BINARIZE), 3)
        self.assertEqual(bits_for_bpd(0.5, 1, 32, BitMode.QUANTIZE, 4), 16)
        self.assertEqual(bits_for_bpd(0.1, 1, 32, BitMode.QUANTIZE, 4), 4)
        self.assertEqual(bits_for_bpd(0.3, 4, 32, BitMode.BINARIZE), 38)


if __name__ == '__main__':
    unittest.main()
