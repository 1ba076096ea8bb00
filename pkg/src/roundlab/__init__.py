"""roundlab: a desk-scale laboratory for weight-only post-training
quantization, rounding-direction backdoor injection, and detection
baselines, built on a self-contained deterministic small-network engine.
"""

__version__ = "0.1.0"
