"""Image restoration with denoising-autoencoder priors."""

__version__ = "0.1.0"
