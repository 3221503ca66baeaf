"""Black-box model inversion by aligning prediction vectors with a generator latent space."""
__version__ = "0.1.0"
