"""Simulation and robust-training toolkit for microring photonic ViT accelerators."""

__version__ = "0.1.0"
