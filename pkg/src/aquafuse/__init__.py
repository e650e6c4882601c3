"""Underwater image enhancement toolkit.

Fusion-based preprocessing, a two-input adversarial enhancement network
built on a small self-contained autodiff engine, and the no-reference
quality metrics used to score enhancement output.
"""

__version__ = "0.1.0"
