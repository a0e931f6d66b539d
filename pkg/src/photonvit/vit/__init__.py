"""Desk-scale Vision Transformer with explicit backward rules."""
