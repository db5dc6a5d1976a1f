"""Guaranteed a posteriori error estimation and adaptivity for
lowest-order locally conservative methods on 2D meshes."""

__version__ = "0.1.0"
