"""Structured pruning and knowledge distillation for a toy cascaded conformer."""

__version__ = "0.1.0"
