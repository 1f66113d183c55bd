"""fedring: round-based federated learning for 3D segmentation at desk scale."""

__version__ = "0.1.0"
