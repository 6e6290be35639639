"""Desk-scale toolkit for edge-oriented model compression experiments:
data-free distillation, partitioned network-of-networks students, and an
analytic distributed-inference cost simulator."""

__version__ = "0.1.0"
