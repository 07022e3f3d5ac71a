"""Empirical auditing of differentially private learners."""

__version__ = "0.1.0"
