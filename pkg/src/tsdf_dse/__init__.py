"""Sparse TSDF fusion with an energy/latency/accuracy design-space explorer."""

__version__ = "0.1.0"
