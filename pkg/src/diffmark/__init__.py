"""Delta-injection watermarking lab for a toy latent diffusion stack."""

__version__ = "0.1.0"
