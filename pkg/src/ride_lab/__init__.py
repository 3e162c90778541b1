"""Routed diverse experts for long-tailed classification, at desk scale."""

__version__ = "0.1.0"
