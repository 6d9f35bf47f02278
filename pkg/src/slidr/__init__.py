"""Superpixel-driven contrastive distillation from images to Lidar point clouds, at desk scale."""

__version__ = "0.1.0"
