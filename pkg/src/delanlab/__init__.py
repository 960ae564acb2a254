"""Desk-scale lab for dual-level pre-fusion alignment in vision-and-language navigation."""

__version__ = "0.1.0"
