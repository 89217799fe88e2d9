"""Distributed test harness for MapReduce-style systems."""

__version__ = "0.1.0"
