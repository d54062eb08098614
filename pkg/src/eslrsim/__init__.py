"""Garment simulation on triangle meshes: smoothing-extended message passing
and geodesic linear attention, trained unsupervised with physics losses."""

__version__ = "0.1.0"
