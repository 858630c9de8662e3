"""Semantic correspondence between source and target in the x0 space.

Features are extracted from predicted-x0 latents with the backend's DIFT
extractor. Each source location is matched to the target location of highest
cosine similarity.
"""

import logging

import torch
import torch.nn.functional as F

from .errors import ShapeError, ConfigError


logger = logging.getLogger(__name__)


MODES = ('progressive', 'initial')

#: Default timestep latents are re-noised to before feature extraction.
DEFAULT_DIFT_TIMESTEP = 261


class CorrelationMap:
	"""Total mapping from source locations to target locations on the latent grid.

	Attributes
	----------
	index : torch.Tensor
		Long tensor of shape ``(h, w)`` holding the row-major flat index of the
		matched target location for every source location.
	score : torch.Tensor
		Cosine similarity of each matched pair, shape ``(h, w)``.
	mode : str
		``'progressive'`` or ``'initial'``.
	valid : torch.Tensor
		Boolean ``(h, w)`` tensor, False where the score is below the match
		threshold. All True without a threshold.
	"""

	def __init__(self, index, score, mode='progressive', valid=None):
		if index.shape != score.shape or index.dim() != 2:
			raise ShapeError('Correlation index and score must be 2-D of equal shape')
		self.index = index
		self.score = score
		self.mode = mode
		self.valid = torch.ones_like(index, dtype=torch.bool) if valid is None else valid

	@classmethod
	def identity(cls, grid):
		"""Map every location to itself, used when matching is switched off.

		Scores are all one.
		"""
		h, w = grid
		index = torch.arange(h * w).reshape(h, w)
		return cls(index, torch.ones(h, w), 'identity')

	@property
	def grid(self):
		return tuple(self.index.shape)

	@property
	def mapping(self):
		"""Matched target coordinates, long tensor of shape ``(h, w, 2)``."""
		w = self.grid[1]
		return torch.stack([self.index // w, self.index % w], dim=-1)

	def is_identity(self):
		h, w = self.grid
		return torch.equal(self.index, torch.arange(h * w).reshape(h, w))

	def __repr__(self):
		return '<%s %s %s>' % (type(self).__name__, self.grid, self.mode)


def _check_features(f_src, f_tar):
	if f_src.data.shape[0] != f_tar.data.shape[0]:
		raise ShapeError('Feature dimensions differ: %d vs %d' % (f_src.data.shape[0], f_tar.data.shape[0]))
	if f_src.grid != f_tar.grid:
		raise ShapeError('Feature grids differ: %s vs %s' % (f_src.grid, f_tar.grid))


def _flat_normalized(f):
	# Zero vectors stay zero and so get similarity 0 with everything
	return F.normalize(f.data.flatten(1), dim=0)


def cosine_similarity_field(f_src, f_tar):
	"""Cosine similarity between every pair of source and target locations.

	Parameters
	----------
	f_src : .FeatureMap
	f_tar : .FeatureMap

	Returns
	-------
	torch.Tensor
		Shape ``(h, w, h, w)``, entry ``[i, j, k, l]`` being the similarity of
		source location ``(i, j)`` and target location ``(k, l)``.

	Raises
	------
	.ShapeError
	"""
	_check_features(f_src, f_tar)
	sim = _flat_normalized(f_src).T @ _flat_normalized(f_tar)
	return sim.reshape(*f_src.grid, *f_tar.grid)


def _upsample_index(index, feature_grid, grid):
	"""Carry a feature-grid mapping to a finer grid by block-wise nearest neighbor.

	Each latent location inherits the match of its feature cell and keeps its
	offset within the cell.
	"""
	(h, w), (H, W) = feature_grid, grid
	if H % h or W % w:
		raise ShapeError('Latent grid %s is not an integer multiple of feature grid %s' % (grid, feature_grid))
	ry, rx = H // h, W // w

	rows = torch.arange(H)
	cols = torch.arange(W)
	cell = index[rows[:, None] // ry, cols[None, :] // rx]
	ti, tj = cell // w, cell % w
	return (ti * ry + rows[:, None] % ry) * W + tj * rx + cols[None, :] % rx


def _upsample_values(values, feature_grid, grid):
	ry, rx = grid[0] // feature_grid[0], grid[1] // feature_grid[1]
	return values.repeat_interleave(ry, dim=0).repeat_interleave(rx, dim=1)


def build_correlation_map(f_src, f_tar, grid=None, mode='progressive', threshold=None):
	"""Match each source location to its most similar target location.

	Ties go to the lowest row-major target index.

	Parameters
	----------
	f_src : .FeatureMap
	f_tar : .FeatureMap
	grid : tuple
		Latent grid to express the mapping on. Defaults to the feature grid.
	mode : str
		Recorded in the result.
	threshold : float
		Optional minimum score. Locations below it are marked invalid.

	Returns
	-------
	.CorrelationMap
	"""
	_check_features(f_src, f_tar)
	fgrid = f_src.grid
	sim = cosine_similarity_field(f_src, f_tar).reshape(fgrid[0] * fgrid[1], -1)

	# torch.max returns the first maximal index
	score, index = sim.max(dim=1)
	index = index.reshape(fgrid)
	score = score.reshape(fgrid)

	grid = fgrid if grid is None else tuple(grid)
	if grid != fgrid:
		index = _upsample_index(index, fgrid, grid)
		score = _upsample_values(score, fgrid, grid)

	valid = None if threshold is None else score >= threshold
	return CorrelationMap(index, score, mode, valid)


def apply_correlation(c, x0_tar):
	"""Gather target values at the matched location of every source location.

	Parameters
	----------
	c : .CorrelationMap
	x0_tar : torch.Tensor
		Latent of shape ``(channels, h, w)``.

	Returns
	-------
	torch.Tensor
	"""
	if tuple(x0_tar.shape[1:]) != c.grid:
		raise ShapeError('Correlation grid %s does not match latent grid %s' % (c.grid, tuple(x0_tar.shape[1:])))
	return x0_tar.flatten(1)[:, c.index.flatten()].reshape(x0_tar.shape)


def match_step(x0_src, x0_tar, t, mode, b, dift_timestep=DEFAULT_DIFT_TIMESTEP, layer=None, threshold=None):
	"""Correlation map between two x0-space latents.

	Parameters
	----------
	x0_src : torch.Tensor
	x0_tar : torch.Tensor
	t : int
		Sampling timestep the latents belong to (informational).
	mode : str
	b : .DiffusionBackend
	dift_timestep : int
	layer
		DIFT layer, backend default if None.
	threshold : float

	Returns
	-------
	.CorrelationMap
	"""
	if mode not in MODES:
		raise ConfigError('Matching mode must be one of %r, got %r' % (MODES, mode))
	f_src = b.extract_dift_features(x0_src, dift_timestep, layer)
	f_tar = b.extract_dift_features(x0_tar, dift_timestep, layer)
	c = build_correlation_map(f_src, f_tar, tuple(x0_src.shape[1:]), mode, threshold)
	logger.debug('Matched at t=%s: mean score %.4f', t, c.score.mean().item())
	return c


class SemanticMatcher:
	"""Produces correlation maps during a run.

	In progressive mode the map is recomputed at every step from the per-step
	predicted x0 pair. In initial mode it is computed once from the clean
	latents of the input images and reused.

	Attributes
	----------
	backend : .DiffusionBackend
	mode : str
	dift_timestep : int
	layer
	threshold : float or None
	"""

	def __init__(self, backend, mode='progressive', dift_timestep=DEFAULT_DIFT_TIMESTEP, layer=None, threshold=None):
		if mode not in MODES:
			raise ConfigError('Matching mode must be one of %r, got %r' % (MODES, mode))
		self.backend = backend
		self.mode = mode
		self.dift_timestep = dift_timestep
		self.layer = layer
		self.threshold = threshold
		self._initial = None

	def _match(self, x0_src, x0_tar, t):
		return match_step(x0_src, x0_tar, t, self.mode, self.backend, self.dift_timestep, self.layer, self.threshold)

	def prepare(self, clean_src, clean_tar):
		"""Compute the initial-mode map from the clean latents of the inputs."""
		if self.mode == 'initial':
			self._initial = self._match(clean_src, clean_tar, None)

	def match_step(self, x0_src, x0_tar, t):
		"""Correlation map for one denoising step.

		Returns
		-------
		.CorrelationMap
		"""
		if self.mode == 'progressive':
			return self._match(x0_src, x0_tar, t)
		if self._initial is None:
			self._initial = self._match(x0_src, x0_tar, t)
		return self._initial

	def similarity(self, x0_src, x0_tar):
		"""Full similarity field of two latents, for debugging dumps."""
		f_src = self.backend.extract_dift_features(x0_src, self.dift_timestep, self.layer)
		f_tar = self.backend.extract_dift_features(x0_tar, self.dift_timestep, self.layer)
		return cosine_similarity_field(f_src, f_tar)
