"""Symbolic regression of multiaxial fatigue life with a constrained policy-gradient search."""

__version__ = "0.1.0"
