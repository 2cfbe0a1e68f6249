"""Desk-scale masked-autoencoder pipeline for spectrogram classification.

Subpackages and modules:

- ``tensorgrad``: reverse-mode autodiff, AdamW, gradient checking, checkpoints
- ``spectro``: spectrogram container, file format, patching, patch normalization
- ``synth``: synthetic labelled corpus
- ``masking``: random and content-aware mask plans
- ``mae``: encoder/decoder model, reconstruction losses, pre-training
- ``classifier``: fusion head, focal loss, fine-tuning
- ``metrics``: multi-label metric panel and seed aggregation
- ``harness``: splits, tuning, ablation grid
- ``cli``: ``mae-lab`` command
"""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
