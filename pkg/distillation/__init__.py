"""Distillation of source models into local-iteration decision-tree models."""

__version__ = '0.4.0'
