"""Learned image codec for machine consumption with latent finetuning."""

__version__ = "0.1.0"
