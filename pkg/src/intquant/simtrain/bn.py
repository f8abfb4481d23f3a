"""Batch-norm folding into the preceding conv / dense weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    ema_mean: np.ndarray
    ema_var: np.ndarray
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if np.any(np.asarray(self.ema_var) < 0):
            raise ValueError("ema_var must be non-negative")

    @property
    def channels(self) -> int:
        return int(np.asarray(self.gamma).shape[0])

    def inv_std(self) -> np.ndarray:
        return 1.0 / np.sqrt(np.asarray(self.ema_var, dtype=np.float64) + self.epsilon)


def fold_batch_norm(w, bn: BatchNormParams, bias=None):
    """Fold ``bn`` into weights whose leading axis is the output channel.

    Returns ``(w_fold, bias_fold)`` with ``w_fold = gamma * w / sqrt(var + eps)``
    and ``bias_fold = beta + gamma * (bias - mean) / sqrt(var + eps)``; ``bias``
    defaults to zero.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape[0] != bn.channels:
        raise ValueError(f"weights have {w.shape[0]} output channels, batch norm has {bn.channels}")
    scale = np.asarray(bn.gamma, dtype=np.float64) * bn.inv_std()
    w_fold = w * scale.reshape((-1,) + (1,) * (w.ndim - 1))
    b = np.zeros(bn.channels) if bias is None else np.asarray(bias, dtype=np.float64)
    bias_fold = np.asarray(bn.beta, dtype=np.float64) + scale * (b - np.asarray(bn.ema_mean))
    return w_fold, bias_fold
