"""Multi-discriminator optimal-transport GAN for non-parallel voice conversion."""

__version__ = "0.1.0"
