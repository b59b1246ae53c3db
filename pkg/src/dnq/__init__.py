"""Desk-scale dynamic network quantization: bit-width search plus iterative quantizer."""

__version__ = "0.1.0"
