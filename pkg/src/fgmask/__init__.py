"""Foreground attention masks versus L-infinity PGD, at desk scale."""

__version__ = "0.1.0"
