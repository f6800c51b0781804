"""Joint multimodal VAE with flow-based unimodal posteriors."""

__version__ = "0.1.0"
