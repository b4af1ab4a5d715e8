"""Precipitation nowcasting with a physics-informed discriminator GAN, at desk scale."""

__version__ = "0.1.0"
