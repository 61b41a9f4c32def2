"""Labeled NIDS dataset generation: attack captures, benign trace filtering, salting."""

__version__ = "0.1.0"
