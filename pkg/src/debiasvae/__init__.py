"""VAE recommender that subtracts bias latents, plus causal-model data augmentation."""

__version__ = "0.1.0"
