"""Discrete flow-matching engine: CTMC jump sampling, shortcut teachers, and
budget-blended training at desk scale."""

__version__ = "0.1.0"
