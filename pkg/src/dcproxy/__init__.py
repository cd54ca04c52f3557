"""Certified lower bounds for AC optimal power flow via dual conic proxies."""

__version__ = "0.1.0"
