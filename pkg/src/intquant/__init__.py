"""Integer-only quantized inference with simulated-quantization training."""

__version__ = "0.1.0"
