"""Neural textured deformable meshes for feature-level render-and-compare."""

__version__ = "0.1.0"
