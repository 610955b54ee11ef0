"""Numerical core: kernels, reverse models, the bound, inference and conditioning."""
