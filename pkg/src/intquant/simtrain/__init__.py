"""Training with simulated quantization."""

from intquant.simtrain.bn import BatchNormParams, fold_batch_norm
from intquant.simtrain.fakequant import (
    FakeQuantNode,
    fake_quant,
    fake_quant_backward,
    fake_quant_forward,
)
from intquant.simtrain.observers import RangeObserver, observe_and_update

__all__ = [
    "BatchNormParams",
    "FakeQuantNode",
    "RangeObserver",
    "fake_quant",
    "fake_quant_backward",
    "fake_quant_forward",
    "fold_batch_norm",
    "observe_and_update",
]
