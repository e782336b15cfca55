"""Multi-view reconstruction into textured superquadric blocks with
surface-bound 2D Gaussian splats."""

__version__ = "0.1.0"
