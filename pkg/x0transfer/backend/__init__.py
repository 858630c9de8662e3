"""Latent diffusion model backends."""

from .base import (
	DiffusionBackend, TextEmbedding, FeatureMap, AttentionCapture, Conditioning, get_backend,
)
from .mock import MockBackend
