"""Desk-scale laboratory for self-training contrastive sentence encoders with regularized distillation."""

__version__ = "0.1.0"
