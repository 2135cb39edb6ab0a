"""Warehouse emergent-incident response: simulator, safety layer and safe multi-agent learners."""

__version__ = "0.1.0"
