"""blurlab: desk-scale experiments on blur robustness of small CNNs."""

__version__ = "0.1.0"
