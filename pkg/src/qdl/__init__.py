"""Quantized-state (LIQSS1) simulation of latency-insertion networks."""

__version__ = "0.1.0"
