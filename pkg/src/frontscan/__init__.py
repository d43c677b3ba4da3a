"""Measure domain fronting, faking and domainless fronting support across shared infrastructure."""

__version__ = "0.1.0"
