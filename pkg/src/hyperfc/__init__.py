"""Hypernetwork-adapted fault-tolerant flight control workbench."""

__version__ = "0.1.0"
