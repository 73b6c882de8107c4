"""Forward-only LiDAR/camera 3D detection with bidirectional local-attention interaction."""

__version__ = "0.1.0"
