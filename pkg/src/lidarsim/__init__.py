"""Camera-conditioned LiDAR visibility simulation: data prep, image-to-image network, point-cloud reconstruction."""

__version__ = "0.1.0"
