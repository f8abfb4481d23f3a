"""Affine quantization parameters and the offline constants derived from them.

A real value ``r`` and its code ``q`` are related by ``r = scale * (q - zero_point)``.
Everything here runs offline (converter / training side) and may use floats;
the integer inference path only ever sees the integers produced here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from intquant.fixedpoint import INT32_MAX, INT32_MIN

SCALE_FLOOR = 1e-6


class InvalidRangeError(ValueError):
    pass


class MultiplierRangeError(ValueError):
    pass


def round_half_away(x):
    """Round to nearest, ties away from zero (scalar or array)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int = 8
    narrow_range: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if not self.qmin <= self.zero_point <= self.qmax:
            raise ValueError(
                f"zero_point {self.zero_point} outside [{self.qmin}, {self.qmax}]"
            )

    @property
    def qmin(self) -> int:
        # narrow range drops code 0 so that, viewed as signed, -2**(bits-1) never occurs
        return 1 if self.narrow_range else 0

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def rmin(self) -> float:
        return self.scale * (self.qmin - self.zero_point)

    @property
    def rmax(self) -> float:
        return self.scale * (self.qmax - self.zero_point)


@dataclass(frozen=True)
class QuantizedMultiplier:
    """``M = (m0_raw / 2**31) * 2**-shift`` with ``m0_raw`` in ``[2**30, 2**31)``."""

    m0_raw: int
    shift: int

    def __post_init__(self):
        if not (1 << 30) <= self.m0_raw <= INT32_MAX:
            raise MultiplierRangeError(f"m0_raw out of range: {self.m0_raw}")
        if not 0 <= self.shift <= 31:
            raise MultiplierRangeError(f"shift out of range: {self.shift}")

    def to_float(self) -> float:
        return self.m0_raw / 2.0**31 * 2.0 ** (-self.shift)


@dataclass(frozen=True)
class NudgedRange:
    a: float
    b: float
    params: QuantParams


def choose_params(a: float, b: float, bits: int = 8, narrow_range: bool = False) -> NudgedRange:
    """Pick scale and zero-point for the real range ``[a, b]``.

    The range is first widened to contain 0.0, then shifted by less than half a
    step so that 0.0 falls exactly on an integer code.
    """
    if not (math.isfinite(a) and math.isfinite(b)):
        raise InvalidRangeError(f"range must be finite, got [{a}, {b}]")
    if a > b:
        raise InvalidRangeError(f"range min {a} exceeds max {b}")
    a = min(a, 0.0)
    b = max(b, 0.0)
    if b - a < SCALE_FLOOR:
        b = a + SCALE_FLOOR
    qmin = 1 if narrow_range else 0
    qmax = (1 << bits) - 1
    scale = (b - a) / (qmax - qmin)
    zp_real = qmin - a / scale
    zero_point = int(min(max(round_half_away(zp_real), qmin), qmax))
    params = QuantParams(scale, zero_point, bits, narrow_range)
    return NudgedRange(params.rmin, params.rmax, params)


def quantize(r, p: QuantParams):
    """Real -> code, saturating to the code range. Returns int64 codes."""
    q = round_half_away(np.asarray(r, dtype=np.float64) / p.scale) + p.zero_point
    q = np.clip(q, p.qmin, p.qmax).astype(np.int64)
    return int(q) if q.ndim == 0 else q


def dequantize(q, p: QuantParams):
    out = p.scale * (np.asarray(q, dtype=np.float64) - p.zero_point)
    return float(out) if out.ndim == 0 else out


def normalize_multiplier(m: float) -> QuantizedMultiplier:
    """Express ``m`` in (0, 1) as a Q0.31 mantissa in [0.5, 1) and a right shift."""
    if not (0.0 < m < 1.0):
        raise MultiplierRangeError(f"multiplier must lie in (0, 1), got {m}")
    mantissa, exponent = math.frexp(m)
    shift = -exponent
    m0 = int(round_half_away(mantissa * 2.0**31))
    if m0 == 1 << 31:
        if shift > 0:
            m0 //= 2
            shift -= 1
        else:
            m0 = INT32_MAX
    if shift > 31:
        raise MultiplierRangeError(f"multiplier {m} too small to represent")
    return QuantizedMultiplier(m0, shift)


def quantize_bias(bias, s_weights: float, s_activations: float) -> np.ndarray:
    """Bias in accumulator units (scale ``s_weights * s_activations``, zero-point 0)."""
    if s_weights <= 0 or s_activations <= 0:
        raise ValueError("scales must be positive")
    q = round_half_away(np.asarray(bias, dtype=np.float64) / (s_weights * s_activations))
    return np.clip(np.atleast_1d(q), INT32_MIN, INT32_MAX).astype(np.int32)


def round_scale_f32(p: QuantParams) -> QuantParams:
    """Same params with the scale rounded to float32, as stored in model files."""
    return QuantParams(float(np.float32(p.scale)), p.zero_point, p.bits, p.narrow_range)


def weight_params(w, bits: int = 8) -> QuantParams:
    """Per-tensor weight params from min/max, narrow range, float32 scale."""
    w = np.asarray(w, dtype=np.float64)
    return round_scale_f32(choose_params(float(w.min()), float(w.max()), bits, narrow_range=True).params)
