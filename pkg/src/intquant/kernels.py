"""Integer-only compute kernels.

Quantized GEMM with factored zero-point handling, the fused output stage
(bias add, fixed-point downscale, saturating cast, clamp), convolution by
patch expansion, quantized addition and concatenation.

Layouts are row-major; activations are NHWC and conv weights OHWI. The
``*_codes`` functions work on raw code arrays plus integer constants and are
what the inference engine calls; the ``*_quantized`` wrappers take and return
:class:`QuantizedTensor`.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from intquant.fixedpoint import (
    INT32_MAX,
    INT32_MIN,
    multiply_by_quantized_multiplier,
)
from intquant.quantization import QuantizedMultiplier, QuantParams, normalize_multiplier


class ShapeError(ValueError):
    pass


class ParamsMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    codes: np.ndarray
    params: QuantParams

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.size and (codes.min() < self.params.qmin or codes.max() > self.params.qmax):
            raise ValueError(f"codes outside [{self.params.qmin}, {self.params.qmax}]")
        object.__setattr__(self, "codes", codes.astype(np.uint8, copy=False))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    def dequantize(self) -> np.ndarray:
        return self.params.scale * (self.codes.astype(np.float64) - self.params.zero_point)

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.codes, other.codes)


@dataclass(frozen=True)
class ZeroPointSums:
    lhs_row_sums: np.ndarray
    rhs_col_sums: np.ndarray
    depth: int


@dataclass(frozen=True, eq=False)
class FusedOutputStage:
    """Everything needed to turn int32 accumulators into output codes."""

    bias: np.ndarray
    multiplier: QuantizedMultiplier
    output_zero_point: int
    clamp_min: int = 0
    clamp_max: int = 255

    def __post_init__(self):
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.int32).reshape(-1))
        if not 0 <= self.clamp_min <= self.clamp_max <= 255:
            raise ValueError(f"bad clamp range [{self.clamp_min}, {self.clamp_max}]")

    def __eq__(self, other):
        if not isinstance(other, FusedOutputStage):
            return NotImplemented
        return (
            np.array_equal(self.bias, other.bias)
            and self.multiplier == other.multiplier
            and self.output_zero_point == other.output_zero_point
            and self.clamp_min == other.clamp_min
            and self.clamp_max == other.clamp_max
        )


@dataclass(frozen=True)
class AddStage:
    x_zero_point: int
    y_zero_point: int
    left_shift: int
    x_multiplier: QuantizedMultiplier
    y_multiplier: QuantizedMultiplier
    out_multiplier: QuantizedMultiplier
    out_zero_point: int
    clamp_min: int = 0
    clamp_max: int = 255


def _check_i32(x: np.ndarray, what: str) -> None:
    assert x.size == 0 or (x.min() >= INT32_MIN and x.max() <= INT32_MAX), f"{what} overflows int32"


def zero_point_sums(lhs_codes: np.ndarray, rhs_codes: np.ndarray) -> ZeroPointSums:
    return ZeroPointSums(
        lhs_codes.sum(axis=1, dtype=np.int64).astype(np.int32),
        rhs_codes.sum(axis=0, dtype=np.int64).astype(np.int32),
        lhs_codes.shape[1],
    )


def _check_gemm_shapes(lhs_shape, rhs_shape) -> None:
    if len(lhs_shape) != 2 or len(rhs_shape) != 2 or lhs_shape[1] != rhs_shape[0]:
        raise ShapeError(f"cannot multiply {tuple(lhs_shape)} by {tuple(rhs_shape)}")


def _core(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    acc = lhs.astype(np.int64) @ rhs.astype(np.int64)
    _check_i32(acc, "accumulator")
    return acc


def gemm_core(lhs: QuantizedTensor, rhs: QuantizedTensor) -> np.ndarray:
    """Exact ``sum_j lhs[i, j] * rhs[j, k]`` of the raw codes, as int32."""
    _check_gemm_shapes(lhs.shape, rhs.shape)
    return _core(lhs.codes, rhs.codes).astype(np.int32)


def _core_int16_pairs(s_lhs: np.ndarray, s_rhs: np.ndarray, row_block: int = 16) -> np.ndarray:
    # Signed-operand core: two int8*int8 products summed in int16 before the
    # int32 accumulate. |product| <= 127*128 so a pair never leaves int16.
    m, n = s_lhs.shape
    if n % 2:
        s_lhs = np.pad(s_lhs, ((0, 0), (0, 1)))
        s_rhs = np.pad(s_rhs, ((0, 1), (0, 0)))
    lhs16 = s_lhs.astype(np.int16)
    rhs16 = s_rhs.astype(np.int16)
    out = np.empty((m, s_rhs.shape[1]), dtype=np.int32)
    for r0 in range(0, m, row_block):
        prod = lhs16[r0 : r0 + row_block, :, None] * rhs16[None, :, :]
        pairs = prod[:, 0::2, :] + prod[:, 1::2, :]
        out[r0 : r0 + row_block] = pairs.sum(axis=1, dtype=np.int32)
    return out.astype(np.int64)


def gemm_accumulate(
    lhs_codes: np.ndarray,
    lhs_zero_point: int,
    rhs_codes: np.ndarray,
    rhs_zero_point: int,
    pairwise: bool = False,
) -> np.ndarray:
    """``sum_j (lhs - Z1)(rhs - Z2)`` via the factored zero-point form.

    ``N*Z1*Z2 - Z1*colsum(rhs) - Z2*rowsum(lhs) + core``. With ``pairwise`` the
    codes are first shifted to int8 (minus 128) and the core accumulation uses
    int16 pair sums; ``lhs`` must then avoid code 0 (signed -128).
    """
    _check_gemm_shapes(lhs_codes.shape, rhs_codes.shape)
    depth = lhs_codes.shape[1]
    if pairwise:
        if lhs_codes.size and lhs_codes.min() == 0:
            raise ValueError("int16 pairing requires lhs codes in [1, 255]")
        lhs_s = lhs_codes.astype(np.int64) - 128
        rhs_s = rhs_codes.astype(np.int64) - 128
        z1, z2 = lhs_zero_point - 128, rhs_zero_point - 128
        core = _core_int16_pairs(lhs_s, rhs_s)
    else:
        lhs_s, rhs_s = lhs_codes, rhs_codes
        z1, z2 = lhs_zero_point, rhs_zero_point
        core = _core(lhs_s, rhs_s)
    sums = zero_point_sums(lhs_s, rhs_s)
    acc = (
        depth * z1 * z2
        - z1 * sums.rhs_col_sums.astype(np.int64)[None, :]
        - z2 * sums.lhs_row_sums.astype(np.int64)[:, None]
        + core
    )
    _check_i32(acc, "zero-point corrected accumulator")
    return acc


def requantize(acc: np.ndarray, stage: FusedOutputStage, bias_axis: int = 0) -> np.ndarray:
    """Fused output stage: bias add, downscale, add Z3, saturate, clamp."""
    bias = stage.bias.astype(np.int64)
    if bias.size and bias.shape[0] != acc.shape[bias_axis]:
        raise ShapeError(f"bias length {bias.shape[0]} != {acc.shape[bias_axis]}")
    if bias.size:
        shape = [1] * acc.ndim
        shape[bias_axis] = -1
        acc = acc + bias.reshape(shape)
    _check_i32(acc, "biased accumulator")
    scaled = multiply_by_quantized_multiplier(acc, stage.multiplier) + stage.output_zero_point
    out = np.clip(scaled, 0, 255)
    out = np.clip(out, stage.clamp_min, stage.clamp_max)
    return out.astype(np.uint8)


def gemm_codes(
    lhs_codes, lhs_zero_point, rhs_codes, rhs_zero_point, stage: FusedOutputStage, pairwise=False
) -> np.ndarray:
    acc = gemm_accumulate(lhs_codes, lhs_zero_point, rhs_codes, rhs_zero_point, pairwise)
    return requantize(acc, stage)


def _check_out(out_params: QuantParams, stage: FusedOutputStage) -> None:
    if out_params.zero_point != stage.output_zero_point:
        raise ParamsMismatchError(
            f"out_params zero_point {out_params.zero_point} != stage {stage.output_zero_point}"
        )
    if stage.clamp_max > out_params.qmax:
        raise ParamsMismatchError(f"clamp_max {stage.clamp_max} exceeds {out_params.qmax}")


def gemm_quantized(
    lhs: QuantizedTensor,
    rhs: QuantizedTensor,
    out_params: QuantParams,
    stage: FusedOutputStage,
    pairwise: bool = False,
) -> QuantizedTensor:
    """Quantized ``lhs @ rhs``; ``stage.multiplier`` encodes ``S1*S2/S3``.

    ``stage.bias`` is indexed by output row (lhs row), matching weights-as-lhs.
    """
    _check_out(out_params, stage)
    codes = gemm_codes(
        lhs.codes, lhs.params.zero_point, rhs.codes, rhs.params.zero_point, stage, pairwise
    )
    return QuantizedTensor(codes, out_params)


def gemm_quantized_tiled(
    lhs: QuantizedTensor,
    rhs: QuantizedTensor,
    out_params: QuantParams,
    stage: FusedOutputStage,
    threads: int = 1,
) -> QuantizedTensor:
    """Same result as :func:`gemm_quantized`, output rows split across threads."""
    _check_out(out_params, stage)
    _check_gemm_shapes(lhs.shape, rhs.shape)
    m = lhs.shape[0]
    if threads <= 1 or m < 2:
        return gemm_quantized(lhs, rhs, out_params, stage)
    bounds = np.linspace(0, m, min(threads, m) + 1).astype(int)

    def tile(i):
        lo, hi = bounds[i], bounds[i + 1]
        sub = FusedOutputStage(
            stage.bias[lo:hi] if stage.bias.size else stage.bias,
            stage.multiplier,
            stage.output_zero_point,
            stage.clamp_min,
            stage.clamp_max,
        )
        return gemm_codes(lhs.codes[lo:hi], lhs.params.zero_point, rhs.codes, rhs.params.zero_point, sub)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(tile, range(len(bounds) - 1)))
    return QuantizedTensor(np.concatenate(parts, axis=0), out_params)


def conv_output_size(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` for one spatial dimension."""
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding == "valid":
        if size < k:
            raise ShapeError(f"kernel {k} larger than input {size}")
        return (size - k) // stride + 1, 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    raise ShapeError(f"unknown padding {padding!r}")


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: str, pad_value):
    """NHWC -> ``(patches, (B, OH, OW))``.

    ``patches`` has shape (B*OH*OW, kh*kw*C) with patch layout (kh, kw, C).
    """
    if x.ndim != 4:
        raise ShapeError(f"expected NHWC input, got shape {x.shape}")
    b, h, w, c = x.shape
    oh, pt, pb = conv_output_size(h, kh, stride, padding)
    ow, pl, pr = conv_output_size(w, kw, stride, padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=pad_value)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (B, OH, OW, C, kh, kw) -> (B, OH, OW, kh, kw, C)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * oh * ow, kh * kw * c), (b, oh, ow)


def conv2d_codes(
    x_codes: np.ndarray,
    x_zero_point: int,
    w_codes: np.ndarray,
    w_zero_point: int,
    stage: FusedOutputStage,
    stride: int = 1,
    padding: str = "valid",
    pairwise: bool = False,
) -> np.ndarray:
    if w_codes.ndim != 4 or x_codes.ndim != 4 or w_codes.shape[3] != x_codes.shape[3]:
        raise ShapeError(f"incompatible input {x_codes.shape} and OHWI weights {w_codes.shape}")
    o, kh, kw, _ = w_codes.shape
    # padding with the input zero-point code is padding with real 0.0
    patches, (b, oh, ow) = im2col(x_codes, kh, kw, stride, padding, x_zero_point)
    out = gemm_codes(w_codes.reshape(o, -1), w_zero_point, patches.T, x_zero_point, stage, pairwise)
    return out.T.reshape(b, oh, ow, o)


def conv2d_quantized(
    input: QuantizedTensor,
    weights: QuantizedTensor,
    out_params: QuantParams,
    stage: FusedOutputStage,
    stride: int = 1,
    padding: str = "valid",
    pairwise: bool = False,
) -> QuantizedTensor:
    """2-D convolution: NHWC input, OHWI weights, zero-point padding."""
    _check_out(out_params, stage)
    codes = conv2d_codes(
        input.codes,
        input.params.zero_point,
        weights.codes,
        weights.params.zero_point,
        stage,
        stride,
        padding,
        pairwise,
    )
    return QuantizedTensor(codes, out_params)


def make_add_stage(
    x_params: QuantParams,
    y_params: QuantParams,
    out_params: QuantParams,
    clamp_min: int | None = None,
    clamp_max: int | None = None,
    left_shift: int = 20,
) -> AddStage:
    """Offline constants for a quantized add.

    Both operands are brought onto a common scale ``2*max(S1, S2) / 2**left_shift``
    so each input multiplier is at most 0.5.
    """
    twice_max = 2.0 * max(x_params.scale, y_params.scale)
    out_mult = twice_max / ((1 << left_shift) * out_params.scale)
    return AddStage(
        x_zero_point=x_params.zero_point,
        y_zero_point=y_params.zero_point,
        left_shift=left_shift,
        x_multiplier=normalize_multiplier(x_params.scale / twice_max),
        y_multiplier=normalize_multiplier(y_params.scale / twice_max),
        out_multiplier=normalize_multiplier(out_mult),
        out_zero_point=out_params.zero_point,
        clamp_min=out_params.qmin if clamp_min is None else clamp_min,
        clamp_max=out_params.qmax if clamp_max is None else clamp_max,
    )


def add_codes(x_codes: np.ndarray, y_codes: np.ndarray, stage: AddStage) -> np.ndarray:
    if x_codes.shape != y_codes.shape:
        raise ShapeError(f"add shape mismatch: {x_codes.shape} vs {y_codes.shape}")
    xs = (x_codes.astype(np.int64) - stage.x_zero_point) << stage.left_shift
    ys = (y_codes.astype(np.int64) - stage.y_zero_point) << stage.left_shift
    total = multiply_by_quantized_multiplier(xs, stage.x_multiplier) + multiply_by_quantized_multiplier(
        ys, stage.y_multiplier
    )
    _check_i32(total, "add intermediate")
    out = multiply_by_quantized_multiplier(total, stage.out_multiplier) + stage.out_zero_point
    out = np.clip(out, 0, 255)
    return np.clip(out, stage.clamp_min, stage.clamp_max).astype(np.uint8)


def add_quantized(x: QuantizedTensor, y: QuantizedTensor, out_params: QuantParams) -> QuantizedTensor:
    stage = make_add_stage(x.params, y.params, out_params)
    return QuantizedTensor(add_codes(x.codes, y.codes, stage), out_params)


def concat_codes(parts: Sequence[np.ndarray], axis: int) -> np.ndarray:
    try:
        return np.concatenate(parts, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


def concat_quantized(parts: Sequence[QuantizedTensor], axis: int = -1) -> QuantizedTensor:
    """Lossless concatenation; every part must carry identical params."""
    if not parts:
        raise ValueError("nothing to concatenate")
    params = parts[0].params
    for p in parts[1:]:
        if p.params != params:
            raise ParamsMismatchError(f"concat params differ: {p.params} vs {params}")
    return QuantizedTensor(concat_codes([p.codes for p in parts], axis), params)
