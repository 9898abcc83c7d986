"""Kernel-superposition attention: tensors, kernels, attention variants and a small ViT/MAE stack."""

__version__ = "0.1.0"
