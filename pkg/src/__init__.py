"""
Average treatment effect estimation for longitudinal trials with dropout.
"""

__version__ = "0.1.0"
