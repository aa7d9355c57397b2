"""Desk-scale harness for language-driven legged-robot navigation in 2.5D grid worlds."""

from __future__ import annotations

__version__ = "0.1.0"
