"""Two-stage LiDAR 3D detector built on separable voxel convolutions, in NumPy."""
__version__ = "0.1.0"
