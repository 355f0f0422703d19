"""Calibration-image synthesis from batch-norm statistics and fake-quantized PTQ."""

__version__ = "0.1.0"
