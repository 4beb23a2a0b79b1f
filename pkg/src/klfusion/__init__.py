"""Optical/SAR fusion for persistent land-cover change detection."""

__version__ = "0.1.0"
