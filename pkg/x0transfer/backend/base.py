"""Abstract interface to a latent diffusion model."""

from abc import ABC, abstractmethod

import torch
import torch.nn.functional as F

from ..errors import ShapeError, BackendError, ConfigError


class TextEmbedding:
	"""Prompt embedding produced by a backend's text encoder.

	Attributes
	----------
	data : torch.Tensor
		Array of shape ``(tokens, dim)``.
	kind : str
		``'conditional'`` or ``'unconditional'``.
	prompt : str
		The prompt the embedding was produced from, or None for optimized
		unconditional embeddings.
	"""

	KINDS = ('conditional', 'unconditional')

	def __init__(self, data, kind='conditional', prompt=None):
		if kind not in self.KINDS:
			raise ValueError('Embedding kind must be one of %r, got %r' % (self.KINDS, kind))
		if data.dim() != 2:
			raise ShapeError('Text embedding must be 2-D, got shape %s' % (tuple(data.shape),))
		self.data = data
		self.kind = kind
		self.prompt = prompt

	@property
	def is_unconditional(self):
		return self.kind == 'unconditional'

	def detach(self):
		return TextEmbedding(self.data.detach(), self.kind, self.prompt)

	def __repr__(self):
		return '<%s %s %s>' % (type(self).__name__, self.kind, tuple(self.data.shape))


class FeatureMap:
	"""Intermediate network features over a spatial grid (DIFT features).

	Attributes
	----------
	data : torch.Tensor
		Array of shape ``(dim, h, w)``.
	source_timestep : int
		Timestep the input was re-noised to before extraction.
	source_layer
		Identifier of the layer the features were read from.
	"""

	def __init__(self, data, source_timestep, source_layer):
		if data.dim() != 3:
			raise ShapeError('Feature map must be 3-D, got shape %s' % (tuple(data.shape),))
		self.data = data
		self.source_timestep = source_timestep
		self.source_layer = source_layer

	@property
	def grid(self):
		return tuple(self.data.shape[1:])

	def __repr__(self):
		return '<%s %s t=%s layer=%r>' % (
			type(self).__name__, tuple(self.data.shape), self.source_timestep, self.source_layer
		)


class AttentionCapture:
	"""Cross-attention maps of selected prompt tokens from one conditioned pass.

	Maps have been resampled to the latent grid by the backend.

	Attributes
	----------
	maps : dict
		Mapping from layer name to a tensor of shape ``(heads, len(token_indices), h, w)``.
	token_indices : list of int
	timestep : int
	"""

	def __init__(self, maps, token_indices, timestep=None):
		self.maps = dict(maps)
		self.token_indices = list(token_indices)
		self.timestep = timestep

	@property
	def grid(self):
		for m in self.maps.values():
			return tuple(m.shape[-2:])
		return None

	def mean_map(self):
		"""Average of the selected tokens' maps over all layers, heads and tokens.

		Returns
		-------
		torch.Tensor
			Shape ``(h, w)``.
		"""
		stacked = torch.cat([m.flatten(0, 1) for m in self.maps.values()], dim=0)
		return stacked.mean(dim=0)

	def __repr__(self):
		return '<%s %d layers tokens=%r t=%s>' % (
			type(self).__name__, len(self.maps), self.token_indices, self.timestep
		)


class Conditioning:
	"""Everything besides the latent that determines a guided noise prediction.

	Attributes
	----------
	cond : .TextEmbedding
	uncond : .TextEmbedding or None
		None means an unguided prediction with ``cond`` alone.
	guidance_scale : float
	"""

	def __init__(self, cond, uncond=None, guidance_scale=1.):
		self.cond = cond
		self.uncond = uncond
		self.guidance_scale = guidance_scale

	def predict(self, backend, x, t):
		"""Get the noise prediction of ``backend`` at ``(x, t)`` under this conditioning."""
		if self.uncond is None:
			return backend.predict_noise_single(x, t, self.cond)
		return backend.predict_noise(x, t, self.cond, self.uncond, self.guidance_scale)


def resample_to_grid(maps, grid, mode='bilinear'):
	"""Resample the trailing two dimensions of ``maps`` to ``grid``."""
	if tuple(maps.shape[-2:]) == tuple(grid):
		return maps
	lead = maps.shape[:-2]
	flat = maps.reshape(-1, 1, *maps.shape[-2:]).float()
	kw = {'align_corners': False} if mode == 'bilinear' else {}
	out = F.interpolate(flat, size=tuple(grid), mode=mode, **kw)
	return out.reshape(*lead, *grid).to(maps.dtype)


class DiffusionBackend(ABC):
	"""Abstract base for latent diffusion model backends.

	Subclasses implement the raw model calls. Classifier-free guidance is
	implemented here on top of :meth:`predict_noise_single`.

	Attributes
	----------
	config : dict
		Backend settings, recorded in run manifests and cache keys.
	"""

	#: Whether gradients flow from noise predictions back into text embeddings.
	supports_embedding_grad = False

	#: Floating point type of latents produced by this backend.
	dtype = torch.float32

	def __init__(self, config=None):
		self.config = dict(config or {})

	@property
	@abstractmethod
	def latent_shape(self):
		"""Shape ``(channels, h, w)`` of latents produced by :meth:`encode_image`."""

	@property
	@abstractmethod
	def image_size(self):
		"""Side length of the square RGB images :meth:`encode_image` accepts."""

	@property
	def latent_grid(self):
		return tuple(self.latent_shape[1:])

	@abstractmethod
	def predict_noise_single(self, x, t, embedding):
		"""Unguided noise prediction for a single text embedding.

		Parameters
		----------
		x : torch.Tensor
			Latent of shape :attr:`latent_shape`.
		t : int
		embedding : .TextEmbedding

		Returns
		-------
		torch.Tensor
		"""

	def predict_noise(self, x, t, cond, uncond, guidance_scale):
		"""Classifier-free guided noise prediction.

		``eps = eps(uncond) + guidance_scale * (eps(cond) - eps(uncond))``

		Parameters
		----------
		x : torch.Tensor
		t : int
		cond : .TextEmbedding
		uncond : .TextEmbedding
		guidance_scale : float

		Returns
		-------
		torch.Tensor
		"""
		eps_uncond = self.predict_noise_single(x, t, uncond)
		eps_cond = self.predict_noise_single(x, t, cond)
		return eps_uncond + guidance_scale * (eps_cond - eps_uncond)

	@abstractmethod
	def encode_image(self, image):
		"""Encode an RGB image to a clean latent.

		Parameters
		----------
		image : numpy.ndarray
			``uint8`` array of shape ``(image_size, image_size, 3)``.

		Returns
		-------
		torch.Tensor
		"""

	@abstractmethod
	def decode_latent(self, x0):
		"""Decode a clean latent to an RGB image.

		Returns
		-------
		numpy.ndarray
			``uint8`` array of shape ``(H, W, 3)``.
		"""

	@abstractmethod
	def embed_text(self, prompt):
		"""Embed a prompt. The empty string gives the unconditional embedding.

		Returns
		-------
		.TextEmbedding
		"""

	@abstractmethod
	def token_indices(self, prompt, word):
		"""Indices of the tokens ``word`` occupies in the embedding of ``prompt``.

		Returns
		-------
		list of int
			Empty if the word does not occur.
		"""

	@abstractmethod
	def extract_dift_features(self, x0, t, layer=None):
		"""Extract DIFT features of a clean latent.

		The latent is re-noised to timestep ``t`` with a fixed internal noise
		seed before being passed through the network.

		Parameters
		----------
		x0 : torch.Tensor
		t : int
		layer
			Layer identifier. Backend default if None.

		Returns
		-------
		.FeatureMap

		Raises
		------
		.ConfigError
			If the layer is unknown.
		"""

	@abstractmethod
	def capture_cross_attention(self, x, t, cond, token_indices):
		"""Run a conditioned pass and capture cross-attention maps.

		Parameters
		----------
		x : torch.Tensor
			Noisy latent at timestep ``t``.
		t : int
		cond : .TextEmbedding
		token_indices : list of int

		Returns
		-------
		.AttentionCapture
			Maps of the requested tokens only, on the latent grid.

		Raises
		------
		IndexError
			If a token index is out of range.
		"""

	def check_latent(self, x):
		if tuple(x.shape) != tuple(self.latent_shape):
			raise ShapeError('Expected latent of shape %s, got %s' % (self.latent_shape, tuple(x.shape)))

	def check_token_indices(self, token_indices, ntokens):
		for i in token_indices:
			if not 0 <= i < ntokens:
				raise IndexError('Token index %d out of range for %d tokens' % (i, ntokens))

	def fingerprint(self):
		"""Identifying settings of this backend for cache keys."""
		return {'backend': type(self).__name__, **self.config}


def get_backend(name, **kwargs):
	"""Construct a backend by name.

	Parameters
	----------
	name : str
		``'mock'`` or ``'diffusion'``.
	kwargs
		Passed to the backend class.

	Returns
	-------
	.DiffusionBackend
	"""
	if name == 'mock':
		from .mock import MockBackend
		return MockBackend(**kwargs)

	if name == 'diffusion':
		try:
			from .stable_diffusion import DiffusersBackend
		except ImportError as exc:
			raise BackendError('The diffusion backend requires the "diffusion" extra: %s' % exc) from exc
		return DiffusersBackend(**kwargs)

	raise ConfigError('Unknown backend %r' % name)
