"""3D GAN super-resolution for volumetric images at desk scale."""

__version__ = "0.1.0"
