"""Topology-preserving implicit shape templates via neural diffeomorphic flows."""

__version__ = "0.1.0"
