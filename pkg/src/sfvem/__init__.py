"""Stabilization-free serendipity virtual element spaces on polyhedral meshes."""

__version__ = "0.1.0"
