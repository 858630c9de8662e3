"""Deterministic stand-in for a latent diffusion model.

Every output is a fixed function of the inputs and a single seed, small enough
to run the whole method at desk scale. The noise predictor is nonlinear in the
latent (so that ``eps(x) != eps(x')`` for different latents) but ignores the text
embedding, which makes classifier-free guidance and null-text optimization
trivial.
"""

import hashlib
import re

import numpy as np
import torch
import torch.nn.functional as F

from .base import DiffusionBackend, TextEmbedding, FeatureMap, AttentionCapture
from ..errors import ShapeError, ConfigError, UnknownTimestepError
from ..schedule import make_alphas_cumprod


def _seed_from(*parts):
	digest = hashlib.sha256(':'.join(map(str, parts)).encode('utf8')).digest()
	return int.from_bytes(digest[:8], 'little') & 0x7fffffffffffffff


class MockBackend(DiffusionBackend):
	"""Deterministic mock backend.

	* Noise prediction: ``eps(x, t) = tanh(W_b * x)`` where ``W_b`` is a seeded
	  convolution filter shared by all timesteps in band ``b``.
	* Codec: images are square with the side of the latent grid; the first three
	  latent channels hold RGB scaled to [0, 1], the remaining ones their mean.
	* Text: hash-seeded random embeddings.
	* DIFT features: seeded random projection of 3x3 patches of the re-noised latent.
	* Cross attention: a Gaussian bump per token, softmax-normalized over tokens
	  against a constant start token.

	Parameters
	----------
	seed : int
	latent_shape : tuple
		``(channels, h, w)`` with ``channels >= 3`` and ``h == w``.
	token_count : int
	embed_dim : int
	noise_scale : float
		Scale of the noise filter. Zero gives ``eps == 0`` identically.
	kernel_size : int
		Spatial extent of the noise filter. 1 makes the predictor act on each
		location independently.
	num_bands : int
		Number of timestep bands with distinct filters.
	feature_dim : int
	attention_centers : dict
		Optional fixed ``(row, col)`` bump centers by token index.
	dtype : torch.dtype
	"""

	DIFT_LAYERS = ('patch', 'point')

	def __init__(self, seed=0, latent_shape=(4, 16, 16), token_count=8, embed_dim=16, noise_scale=1.0,
	             kernel_size=3, num_bands=10, num_train_timesteps=1000, feature_dim=32,
	             attention_centers=None, dtype=torch.float32):
		latent_shape = tuple(int(n) for n in latent_shape)
		if len(latent_shape) != 3 or latent_shape[0] < 3 or latent_shape[1] != latent_shape[2]:
			raise ConfigError('Mock latent shape must be (channels >= 3, n, n), got %r' % (latent_shape,))
		if kernel_size % 2 != 1:
			raise ConfigError('Mock kernel size must be odd')

		super().__init__(dict(
			seed=seed, latent_shape=list(latent_shape), token_count=token_count, embed_dim=embed_dim,
			noise_scale=noise_scale, kernel_size=kernel_size, num_bands=num_bands,
			feature_dim=feature_dim,
		))
		self.seed = seed
		self._latent_shape = latent_shape
		self.token_count = token_count
		self.embed_dim = embed_dim
		self.noise_scale = noise_scale
		self.kernel_size = kernel_size
		self.num_bands = num_bands
		self.num_train_timesteps = num_train_timesteps
		self.dtype = dtype
		self.train_alphas = make_alphas_cumprod(num_train_timesteps)

		gen = torch.Generator().manual_seed(seed)
		c = latent_shape[0]
		fan_in = c * kernel_size ** 2
		self.filters = torch.randn(num_bands, c, c, kernel_size, kernel_size, generator=gen, dtype=torch.float64)
		self.filters *= noise_scale / fan_in ** 0.5
		self.projection = torch.randn(feature_dim, c * 9, generator=gen, dtype=torch.float64)

		n = latent_shape[1]
		centers = torch.rand(token_count, 2, generator=gen, dtype=torch.float64) * (n - 1)
		for k, (ci, cj) in dict(attention_centers or {}).items():
			centers[k] = torch.tensor([ci, cj], dtype=torch.float64)
		self.attention_centers = centers
		self.attention_width = n / 8.

	@property
	def latent_shape(self):
		return self._latent_shape

	@property
	def image_size(self):
		return self._latent_shape[1]

	def _band(self, t):
		if not 0 <= t < self.num_train_timesteps:
			raise UnknownTimestepError('Timestep %r outside of training range' % (t,))
		return min(t * self.num_bands // self.num_train_timesteps, self.num_bands - 1)

	def predict_noise_single(self, x, t, embedding):
		self.check_latent(x)
		w = self.filters[self._band(t)].to(x.dtype)
		return torch.tanh(F.conv2d(x[None], w, padding=self.kernel_size // 2)[0])

	def encode_image(self, image):
		image = np.asarray(image)
		n = self.image_size
		if image.shape != (n, n, 3):
			raise ShapeError('Expected image of shape %s, got %s' % ((n, n, 3), image.shape))
		rgb = torch.from_numpy(image.astype(np.float64) / 255.).permute(2, 0, 1)
		extra = rgb.mean(dim=0, keepdim=True).expand(self._latent_shape[0] - 3, n, n)
		return torch.cat([rgb, extra], dim=0).to(self.dtype).contiguous()

	def decode_latent(self, x0):
		self.check_latent(x0)
		rgb = (x0[:3].detach().double().clamp(0, 1) * 255.).round()
		return rgb.permute(1, 2, 0).numpy().astype(np.uint8)

	def embed_text(self, prompt):
		gen = torch.Generator().manual_seed(_seed_from(self.seed, 'text', prompt))
		data = torch.randn(self.token_count, self.embed_dim, generator=gen).to(self.dtype)
		kind = 'unconditional' if prompt == '' else 'conditional'
		return TextEmbedding(data, kind, prompt)

	@staticmethod
	def _words(text):
		return re.findall(r'[\w\'-]+', text.lower())

	def token_indices(self, prompt, word):
		tokens = self._words(prompt)
		target = self._words(word)
		if not target:
			return []

		# Index 0 is the start token
		for i in range(len(tokens) - len(target) + 1):
			if tokens[i:i + len(target)] == target:
				return [j + 1 for j in range(i, i + len(target)) if j + 1 < self.token_count]
		return []

	def extract_dift_features(self, x0, t, layer=None):
		layer = 'patch' if layer is None else layer
		if layer not in self.DIFT_LAYERS:
			raise ConfigError('Unknown DIFT layer %r for mock backend, expected one of %r' % (layer, self.DIFT_LAYERS))
		self.check_latent(x0)

		gen = torch.Generator().manual_seed(_seed_from(self.seed, 'dift', t))
		noise = torch.randn(self._latent_shape, generator=gen, dtype=torch.float64)
		a = float(self.train_alphas[t])
		x_t = a ** 0.5 * x0.double() + (1 - a) ** 0.5 * noise

		c, h, w = self._latent_shape
		if layer == 'patch':
			patches = F.unfold(x_t[None], kernel_size=3, padding=1)[0]
		else:
			patches = x_t.reshape(c, 1, h * w).expand(c, 9, h * w).reshape(c * 9, h * w)
		features = (self.projection @ patches).reshape(-1, h, w)
		return FeatureMap(features.to(x0.dtype), t, layer)

	def attention_probs(self):
		"""Softmax-normalized attention of every location over all tokens.

		Returns
		-------
		torch.Tensor
			Shape ``(token_count, h, w)``, summing to one over the first axis.
		"""
		n = self._latent_shape[1]
		coords = torch.arange(n, dtype=torch.float64)
		di = coords[None, :, None] - self.attention_centers[:, 0, None, None]
		dj = coords[None, None, :] - self.attention_centers[:, 1, None, None]
		logits = 4. - (di ** 2 + dj ** 2) / (2 * self.attention_width ** 2)
		# Start token soaks up attention away from every bump
		logits[0] = 0.
		return torch.softmax(logits, dim=0)

	def capture_cross_attention(self, x, t, cond, token_indices):
		self.check_latent(x)
		self.check_token_indices(token_indices, self.token_count)
		probs = self.attention_probs()[list(token_indices)]
		return AttentionCapture({'mock': probs[None].to(x.dtype)}, token_indices, t)
