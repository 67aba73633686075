"""Causal evaluation of inline rework decisions in phosphor-converted LED production."""

from __future__ import annotations

__version__ = "0.1.0"
