"""Dense deformable-category 3D fitting with canonical spherical embeddings."""

__version__ = "0.1.0"
