"""EMA range observers for activation quantization ranges."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np


@dataclass
class RangeObserver:
    decay: float = 0.999
    ema_min: float = 0.0
    ema_max: float = 0.0
    steps_seen: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {self.decay}")

    @property
    def initialized(self) -> bool:
        return self.steps_seen > 0

    def update(self, batch) -> "RangeObserver":
        """Fold one batch's (min, max) into the moving averages, in place."""
        batch = np.asarray(batch)
        if batch.size == 0:
            raise ValueError("cannot observe an empty batch")
        lo, hi = float(batch.min()), float(batch.max())
        if self.steps_seen == 0:
            self.ema_min, self.ema_max = lo, hi
        else:
            self.ema_min = self.decay * self.ema_min + (1.0 - self.decay) * lo
            self.ema_max = self.decay * self.ema_max + (1.0 - self.decay) * hi
        self.steps_seen += 1
        return self

    @property
    def range(self) -> tuple[float, float]:
        return self.ema_min, self.ema_max


def observe_and_update(obs: RangeObserver, batch) -> RangeObserver:
    """Pure variant of :meth:`RangeObserver.update`; ``obs`` is left untouched."""
    return dataclasses.replace(obs).update(batch)
