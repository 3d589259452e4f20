"""Conformal capacities and the Ferrand pseudometric on simplicial meshes."""

__version__ = "1.0.0"
