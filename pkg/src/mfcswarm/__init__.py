"""Decentralised mean-field control of swarms on 2D manifolds."""

__version__ = "0.1.0"
