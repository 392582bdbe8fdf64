"""Desk-scale out-of-distribution pipeline: copy-paste pre-training,
noisy-label test-time adaptation and entropy-gated ensembling."""

__version__ = "0.1.0"
