"""Diffusion probabilistic modeling toolkit - src package."""
