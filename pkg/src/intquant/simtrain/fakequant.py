"""Fake quantization: the float-domain quantize/dequantize round trip."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from intquant.quantization import NudgedRange, QuantParams, choose_params, dequantize, quantize


def fake_quant(r, params: QuantParams) -> np.ndarray:
    # clamp(round(r/S) + Z) in code space is the same map as rounding the
    # clamped offset from the nudged minimum; going through the codes keeps
    # outputs bit-identical to dequantize(quantize(r)).
    return dequantize(quantize(r, params), params)


def fake_quant_forward(r, a: float, b: float, bits: int = 8, narrow_range: bool = False) -> np.ndarray:
    """Map ``r`` onto the ``2**bits``-level grid of the nudged range ``[a, b]``."""
    return fake_quant(r, choose_params(a, b, bits, narrow_range).params)


def fake_quant_backward(upstream_grad, r, a: float, b: float) -> np.ndarray:
    """Straight-through gradient: identity inside ``[a, b]``, zero where clamped."""
    r = np.asarray(r)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != r.shape:
        raise ValueError(f"gradient shape {g.shape} != input shape {r.shape}")
    return np.where((r >= a) & (r <= b), g, 0.0)


@dataclass
class FakeQuantNode:
    range: NudgedRange
    bits: int = 8
    enabled: bool = True

    def forward(self, r):
        if not self.enabled:
            return np.asarray(r, dtype=np.float64)
        return fake_quant(r, self.range.params)

    def backward(self, upstream_grad, r):
        if not self.enabled:
            return np.asarray(upstream_grad, dtype=np.float64)
        return fake_quant_backward(upstream_grad, r, self.range.a, self.range.b)
