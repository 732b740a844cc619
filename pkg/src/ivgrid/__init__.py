"""Hybrid physics and learned-device power system analysis in current-voltage form."""

__version__ = "0.1.0"
