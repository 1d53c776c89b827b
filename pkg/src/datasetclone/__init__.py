"""Synthetic dataset cloning toolkit.

Compiles class metadata into prompt plans, drives seeded text-to-image
backends, stores generated images with provenance, trains classifiers from
scratch, and evaluates them (top-k, linear probes, representation statistics).
"""

__version__ = "0.1.0"
