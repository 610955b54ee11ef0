"""Experiment graph nodes."""
