"""Desk-scale lab for bidirectional selective-SSM blocks with token merging
and short re-training."""

__version__ = "0.1.0"
