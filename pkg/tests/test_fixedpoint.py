import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intquant import fixedpoint as fp
from intquant.quantization import QuantizedMultiplier

i32 = st.integers(fp.INT32_MIN, fp.INT32_MAX)

# measured max |error| over 1e5 uniform inputs with 4 integer bits:
# logistic ~7.1e-8, tanh ~1.4e-7
LOGISTIC_MAX_ERROR = 2.0**-23
TANH_MAX_ERROR = 2.0**-22


def srdhm_oracle(a: int, b: int) -> int:
    if a == b == fp.INT32_MIN:
        return fp.INT32_MAX
    return math.floor(Fraction(a * b, 1 << 31) + Fraction(1, 2))


def rdbp_oracle(x: int, n: int) -> int:
    q = Fraction(x, 1 << n)
    mag = math.floor(abs(q) + Fraction(1, 2))
    return mag if q >= 0 else -mag


class TestHighMul:
    def test_zero_annihilates(self):
        assert fp.saturating_rounding_doubling_high_mul(0, 123456789) == 0
        assert fp.saturating_rounding_doubling_high_mul(-99, 0) == 0

    def test_min_times_min_saturates(self):
        assert fp.saturating_rounding_doubling_high_mul(fp.INT32_MIN, fp.INT32_MIN) == fp.INT32_MAX

    def test_half_times_half(self):
        assert fp.saturating_rounding_doubling_high_mul(1 << 30, 1 << 30) == 1 << 29

    @given(i32, i32)
    def test_matches_exact_oracle(self, a, b):
        assert fp.saturating_rounding_doubling_high_mul(a, b) == srdhm_oracle(a, b)

    @given(i32, i32)
    def test_commutative(self, a, b):
        assert fp.saturating_rounding_doubling_high_mul(a, b) == fp.saturating_rounding_doubling_high_mul(b, a)

    def test_vectorized_equals_scalar(self):
        rng = np.random.default_rng(0)
        a = rng.integers(fp.INT32_MIN, fp.INT32_MAX, 500, endpoint=True)
        b = rng.integers(fp.INT32_MIN, fp.INT32_MAX, 500, endpoint=True)
        vec = fp.saturating_rounding_doubling_high_mul(a, b)
        assert [int(v) for v in vec] == [srdhm_oracle(int(x), int(y)) for x, y in zip(a, b)]

    def test_scalar_in_scalar_out(self):
        assert isinstance(fp.saturating_rounding_doubling_high_mul(3, 4), int)


class TestRoundingShift:
    def test_negative_tie_rounds_away(self):
        assert fp.rounding_divide_by_pot(-12, 3) == -2

    def test_positive_tie_rounds_away(self):
        assert fp.rounding_divide_by_pot(12, 3) == 2

    @given(i32)
    def test_zero_exponent_is_identity(self, x):
        assert fp.rounding_divide_by_pot(x, 0) == x

    @given(i32, st.integers(0, 31))
    def test_matches_exact_oracle(self, x, n):
        assert fp.rounding_divide_by_pot(x, n) == rdbp_oracle(x, n)

    @given(st.integers(fp.INT32_MIN + 1, fp.INT32_MAX), st.integers(0, 31))
    def test_odd_symmetry(self, x, n):
        assert fp.rounding_divide_by_pot(-x, n) == -fp.rounding_divide_by_pot(x, n)

    @pytest.mark.parametrize("n", [-1, 32])
    def test_exponent_out_of_range(self, n):
        with pytest.raises(ValueError):
            fp.rounding_divide_by_pot(5, n)

    def test_array_exponents(self):
        x = np.array([-12, 12, 7, -7])
        n = np.array([3, 3, 1, 1])
        assert fp.rounding_divide_by_pot(x, n).tolist() == [-2, 2, 4, -4]


class TestQuantizedMultiplier:
    def test_zero_accumulator(self):
        assert fp.multiply_by_quantized_multiplier(0, QuantizedMultiplier(1 << 30, 3)) == 0

    def test_half(self):
        assert fp.multiply_by_quantized_multiplier(1 << 10, QuantizedMultiplier(1 << 30, 0)) == 1 << 9

    @given(i32, st.integers(1 << 30, fp.INT32_MAX), st.integers(0, 31))
    def test_within_one_of_exact_product(self, acc, m0, shift):
        m = QuantizedMultiplier(m0, shift)
        exact = Fraction(acc * m0, 1 << (31 + shift))
        assert abs(fp.multiply_by_quantized_multiplier(acc, m) - exact) <= 1


class TestSaturatingShift:
    def test_saturates_both_ways(self):
        assert fp.saturating_left_shift(1 << 30, 2) == fp.INT32_MAX
        assert fp.saturating_left_shift(-(1 << 30), 2) == fp.INT32_MIN

    @given(st.integers(-(1 << 20), 1 << 20), st.integers(0, 10))
    def test_exact_when_in_range(self, x, n):
        assert fp.saturating_left_shift(x, n) == x * 2**n


class TestFixedQ:
    def test_round_trip(self):
        x = fp.FixedQ.from_float(0.75, 0)
        assert x.raw == 3 << 29
        assert x.to_float() == 0.75

    def test_integer_bits_mismatch(self):
        with pytest.raises(ValueError):
            fp.FixedQ(1, 0) + fp.FixedQ(1, 1)

    def test_mul_adds_integer_bits(self):
        p = fp.FixedQ.from_float(1.5, 2) * fp.FixedQ.from_float(2.0, 3)
        assert p.integer_bits == 5
        assert p.to_float() == 3.0

    def test_add_saturates(self):
        assert (fp.FixedQ(fp.INT32_MAX, 0) + fp.FixedQ(5, 0)).raw == fp.INT32_MAX

    def test_neg_saturates(self):
        assert (-fp.FixedQ(fp.INT32_MIN, 0)).raw == fp.INT32_MAX

    def test_rejects_out_of_range_raw(self):
        with pytest.raises(ValueError):
            fp.FixedQ(1 << 31, 0)


class TestTanhLogistic:
    def test_tanh_zero(self):
        assert fp.fixed_tanh(fp.FixedQ(0, 4)).raw == 0

    def test_logistic_zero(self):
        assert fp.fixed_logistic(fp.FixedQ(0, 4)).raw == 1 << 30

    @given(st.integers(fp.INT32_MIN + 1, fp.INT32_MAX), st.integers(0, 6))
    def test_tanh_odd(self, raw, ibits):
        assert fp.fixed_tanh(fp.FixedQ(raw, ibits)).raw == -fp.fixed_tanh(fp.FixedQ(-raw, ibits)).raw

    @given(st.integers(fp.INT32_MIN + 1, fp.INT32_MAX), st.integers(0, 6))
    def test_logistic_complement(self, raw, ibits):
        s = fp.fixed_logistic(fp.FixedQ(raw, ibits)).raw + fp.fixed_logistic(fp.FixedQ(-raw, ibits)).raw
        assert abs(s - (1 << 31)) <= 1

    @pytest.mark.parametrize("ibits", [0, 2, 4, 5])
    def test_error_bound(self, ibits):
        rng = np.random.default_rng(ibits)
        raw = rng.integers(fp.INT32_MIN + 1, fp.INT32_MAX, 20000, endpoint=True)
        x = fp.FixedQ(raw, ibits)
        v = x.to_float()
        assert np.max(np.abs(fp.fixed_logistic(x).to_float() - 1 / (1 + np.exp(-v)))) <= LOGISTIC_MAX_ERROR
        assert np.max(np.abs(fp.fixed_tanh(x).to_float() - np.tanh(v))) <= TANH_MAX_ERROR

    @settings(max_examples=50)
    @given(st.lists(st.integers(fp.INT32_MIN, fp.INT32_MAX), min_size=2, max_size=50))
    def test_monotone(self, raws):
        raws = np.sort(np.array(raws, dtype=np.int64))
        x = fp.FixedQ(raws, 4)
        assert np.all(np.diff(fp.fixed_tanh(x).raw) >= 0)
        assert np.all(np.diff(fp.fixed_logistic(x).raw) >= 0)

    def test_deterministic(self):
        x = fp.FixedQ(np.arange(-1000, 1000) * 1000003, 4)
        assert np.array_equal(fp.fixed_tanh(x).raw, fp.fixed_tanh(x).raw)
