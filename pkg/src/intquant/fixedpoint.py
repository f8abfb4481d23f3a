"""Bit-exact fixed-point primitives.

Portable emulation of the 32-bit fixed-point arithmetic used by the integer
inference path: a rounding doubling high multiply (SQRDMULH semantics), a
round-to-nearest right shift with ties away from zero, and table-free
logistic / tanh evaluated purely in integer arithmetic.

Every function accepts Python ints or integer numpy arrays. Arrays are
processed in int64 so that 32x32-bit products are exact; results always lie
in the int32 range. Scalar inputs give scalar (``int``) outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1

IntLike = Union[int, np.ndarray]


def _as_i64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.int64)


def _finish(result: np.ndarray, *inputs) -> IntLike:
    if all(np.ndim(v) == 0 for v in inputs):
        return int(result)
    return result


def saturating_rounding_doubling_high_mul(a: IntLike, b: IntLike) -> IntLike:
    """Return round((a * b) / 2**31), saturated to int32.

    This is the high half of the doubled 64-bit product ``2ab`` after adding
    the rounding constant, i.e. ``floor((a*b + 2**30) / 2**31)``. The only
    input pair whose result does not fit is ``a == b == -2**31``.
    """
    a64 = _as_i64(a)
    b64 = _as_i64(b)
    res = (a64 * b64 + (1 << 30)) >> 31
    overflow = (a64 == INT32_MIN) & (b64 == INT32_MIN)
    res = np.where(overflow, INT32_MAX, res)
    return _finish(res, a, b)


def rounding_divide_by_pot(x: IntLike, exponent: IntLike) -> IntLike:
    """Divide by ``2**exponent``, rounding to nearest with ties away from zero.

    >>> rounding_divide_by_pot(-12, 3)
    -2
    """
    e = _as_i64(exponent)
    if np.any(e < 0) or np.any(e > 31):
        raise ValueError(f"exponent must be in [0, 31], got {exponent!r}")
    x64 = _as_i64(x)
    mask = (np.int64(1) << e) - 1
    remainder = x64 & mask
    threshold = (mask >> 1) + (x64 < 0)
    res = (x64 >> e) + (remainder > threshold)
    return _finish(res, x, exponent)


def multiply_by_quantized_multiplier(acc: IntLike, m) -> IntLike:
    """Scale an int32 accumulator by a normalized multiplier ``(m0_raw, shift)``."""
    return rounding_divide_by_pot(
        saturating_rounding_doubling_high_mul(acc, m.m0_raw), m.shift
    )


def saturating_left_shift(x: IntLike, exponent: int) -> IntLike:
    if not 0 <= exponent <= 31:
        raise ValueError(f"exponent must be in [0, 31], got {exponent}")
    res = np.clip(_as_i64(x) << exponent, INT32_MIN, INT32_MAX)
    return _finish(res, x)


def _saturating_neg(x: np.ndarray) -> np.ndarray:
    return np.where(x == INT32_MIN, INT32_MAX, -x)


def _rescale(raw: np.ndarray, src_bits: int, dst_bits: int) -> np.ndarray:
    shift = src_bits - dst_bits
    if shift >= 0:
        return np.clip(raw << shift, INT32_MIN, INT32_MAX)
    return _as_i64(rounding_divide_by_pot(raw, -shift))


def _rounding_half_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    s = a + b
    s = s + np.where(s >= 0, 1, -1)
    # truncating division by two
    return np.where(s >= 0, s >> 1, -((-s) >> 1))


@dataclass(frozen=True)
class FixedQ:
    """A 32-bit fixed-point value (or array of values).

    The real value is ``raw * 2**(integer_bits - 31)``; ``integer_bits == 0``
    covers ``[-1, 1)``.
    """

    raw: IntLike
    integer_bits: int

    def __post_init__(self):
        if not 0 <= self.integer_bits <= 24:
            raise ValueError(f"integer_bits out of range: {self.integer_bits}")
        r = _as_i64(self.raw)
        if np.any(r < INT32_MIN) or np.any(r > INT32_MAX):
            raise ValueError("raw value outside int32 range")

    @classmethod
    def from_float(cls, value, integer_bits: int) -> "FixedQ":
        scaled = np.asarray(value, dtype=np.float64) * 2.0 ** (31 - integer_bits)
        raw = np.clip(np.round(scaled), INT32_MIN, INT32_MAX).astype(np.int64)
        return cls(int(raw) if raw.ndim == 0 else raw, integer_bits)

    def to_float(self):
        return np.asarray(self.raw, dtype=np.float64) * 2.0 ** (self.integer_bits - 31)

    def _check(self, other: "FixedQ"):
        if not isinstance(other, FixedQ):
            return NotImplemented
        if other.integer_bits != self.integer_bits:
            raise ValueError(
                f"integer_bits mismatch: {self.integer_bits} vs {other.integer_bits}"
            )

    def __add__(self, other: "FixedQ") -> "FixedQ":
        self._check(other)
        res = np.clip(_as_i64(self.raw) + _as_i64(other.raw), INT32_MIN, INT32_MAX)
        return FixedQ(_finish(res, self.raw, other.raw), self.integer_bits)

    def __sub__(self, other: "FixedQ") -> "FixedQ":
        self._check(other)
        res = np.clip(_as_i64(self.raw) - _as_i64(other.raw), INT32_MIN, INT32_MAX)
        return FixedQ(_finish(res, self.raw, other.raw), self.integer_bits)

    def __mul__(self, other: "FixedQ") -> "FixedQ":
        if not isinstance(other, FixedQ):
            return NotImplemented
        raw = saturating_rounding_doubling_high_mul(self.raw, other.raw)
        return FixedQ(raw, self.integer_bits + other.integer_bits)

    def __neg__(self) -> "FixedQ":
        return FixedQ(_finish(_saturating_neg(_as_i64(self.raw)), self.raw), self.integer_bits)


# Q0.31 constants: round(c * 2**31)
_EXP_MINUS_ONE_EIGHTH = 1895147668
_ONE_THIRD = 715827883
# barrel shifter: (power-of-two exponent k, round(exp(-2**k) * 2**31))
_EXP_BARREL = (
    (-2, 1672461947),
    (-1, 1302514674),
    (0, 790015084),
    (1, 290630308),
    (2, 39332535),
    (3, 720401),
    (4, 242),
)
# Q2.29 Newton-Raphson seed for 1/x on [0.5, 1]
_48_OVER_17 = 1515870810
_NEG_32_OVER_17 = -1010580540
_ONE_Q2 = 1 << 29

_mul = saturating_rounding_doubling_high_mul


def _exp_on_interval_neg_quarter_to_zero(a: np.ndarray) -> np.ndarray:
    # Taylor expansion of exp around -1/8, Q0.31 in and out
    x = a + (1 << 28)
    x2 = _mul(x, x)
    x3 = _mul(x2, x)
    x4 = _mul(x2, x2)
    x4_over_4 = rounding_divide_by_pot(x4, 2)
    poly = rounding_divide_by_pot(_mul(x4_over_4 + x3, _ONE_THIRD) + x2, 1)
    return _EXP_MINUS_ONE_EIGHTH + _mul(_EXP_MINUS_ONE_EIGHTH, x + poly)


def _exp_on_negative_values(a: np.ndarray, integer_bits: int) -> np.ndarray:
    """exp(a) for a <= 0 given with ``integer_bits``; result in Q0.31."""
    frac_bits = 31 - integer_bits
    one_quarter = 1 << (frac_bits - 2)
    a_mod = (a & (one_quarter - 1)) - one_quarter
    result = _exp_on_interval_neg_quarter_to_zero(_rescale(a_mod, integer_bits, 0))
    remainder = a_mod - a
    for k, multiplier in _EXP_BARREL:
        if integer_bits > k:
            bit = (remainder & (np.int64(1) << (frac_bits + k))) != 0
            result = np.where(bit, _mul(result, multiplier), result)
    if integer_bits > 5:
        result = np.where(a < -(np.int64(1) << (36 - integer_bits)), 0, result)
    return np.where(a == 0, INT32_MAX, result)


def _reciprocal_half_denominator(a: np.ndarray) -> np.ndarray:
    """Newton-Raphson estimate of 2 / (1 + a) in Q2.29, for a in [0, 1)."""
    half_den = _rounding_half_sum(a, np.int64(INT32_MAX))
    x = _48_OVER_17 + _mul(half_den, _NEG_32_OVER_17)
    for _ in range(3):
        one_minus = _ONE_Q2 - _mul(half_den, x)
        x = x + _rescale(_mul(x, one_minus), 4, 2)
    return x


def _one_over_one_plus_x(a: np.ndarray) -> np.ndarray:
    # 2/(1+a) in Q2.29 -> 1/(1+a) in Q0.31: halve (reinterpret as Q1.30), then rescale
    return _rescale(_reciprocal_half_denominator(a), 1, 0)


def _one_minus_x_over_one_plus_x(a: np.ndarray) -> np.ndarray:
    return _rescale(_reciprocal_half_denominator(a) - _ONE_Q2, 2, 0)


def fixed_logistic(x: FixedQ) -> FixedQ:
    """Logistic function in pure fixed point; output has 0 integer bits."""
    a = _as_i64(x.raw)
    positive = a > 0
    abs_in = np.where(positive, a, _saturating_neg(a))
    r_pos = _one_over_one_plus_x(
        _exp_on_negative_values(_saturating_neg(abs_in), x.integer_bits)
    )
    r_neg = INT32_MAX - r_pos
    res = np.where(a == 0, 1 << 30, np.where(positive, r_pos, r_neg))
    return FixedQ(_finish(res, x.raw), 0)


def fixed_tanh(x: FixedQ) -> FixedQ:
    """Hyperbolic tangent in pure fixed point; output has 0 integer bits."""
    a = _as_i64(x.raw)
    negative = a < 0
    n = np.where(negative, a, _saturating_neg(a))
    # same raw read with one more integer bit doubles the value: exp(2n)
    t = _one_minus_x_over_one_plus_x(_exp_on_negative_values(n, x.integer_bits + 1))
    res = np.where(a == 0, 0, np.where(negative, -t, t))
    return FixedQ(_finish(res, x.raw), 0)
