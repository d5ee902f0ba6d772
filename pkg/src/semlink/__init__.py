"""Vector-quantized digital semantic link simulator over OFDM."""

__version__ = "0.1.0"
