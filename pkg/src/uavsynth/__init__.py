"""Plane-factorised radiance fields for synthetic UAV detection data."""
__version__ = "0.1.0"
