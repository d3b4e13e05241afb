"""Desk-scale toolkit for embodied driving-scene QA.

Subpackages cover the full pipeline: a spatial grid codec that serializes
3D cells through a remapped text vocabulary, a time-aware token-selection
bank, QA-pair constructors for the ten benchmark tasks plus planning, the
evaluation metric suite, and an event-sourced human-review loop.
"""

__version__ = "0.1.0"
