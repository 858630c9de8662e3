"""Object masks from cross-attention."""

import logging

import numpy as np
import torch
from PIL import Image

from .errors import ContractError, ShapeError, check_unit_interval


logger = logging.getLogger(__name__)


class ObjectMask:
	"""Binary mask over the latent grid.

	Attributes
	----------
	data : torch.Tensor
		Boolean tensor of shape ``(h, w)``.
	token_indices : list of int
		Prompt tokens the mask was derived from (empty for masks read from file).
	threshold : float
	aggregate : torch.Tensor
		Normalized attention map before thresholding, if available.
	"""

	def __init__(self, data, token_indices=(), threshold=0.5, aggregate=None):
		if data.dim() != 2:
			raise ShapeError('Mask must be 2-D, got shape %s' % (tuple(data.shape),))
		self.data = data.bool()
		self.token_indices = list(token_indices)
		self.threshold = threshold
		self.aggregate = aggregate

	@classmethod
	def full(cls, grid, token_indices=(), threshold=0.5):
		"""All-ones mask."""
		return cls(torch.ones(grid, dtype=torch.bool), token_indices, threshold)

	@classmethod
	def from_image(cls, path, grid, threshold=0.5):
		"""Read a user-painted mask.

		The image is converted to grayscale and resized to the grid. Pixels at
		or above ``threshold`` of full intensity are in the mask.

		Parameters
		----------
		path : str or pathlib.Path
		grid : tuple
		threshold : float

		Returns
		-------
		.ObjectMask
		"""
		check_unit_interval(threshold, 'Mask threshold')
		with Image.open(path) as img:
			img = img.convert('L').resize((grid[1], grid[0]), Image.NEAREST)
			values = np.asarray(img, dtype=np.float64) / 255.
		return cls(torch.from_numpy(values >= threshold), (), threshold)

	@property
	def grid(self):
		return tuple(self.data.shape)

	@property
	def count(self):
		return int(self.data.sum())

	def as_float(self, dtype=torch.float32):
		return self.data.to(dtype)

	def save_png(self, path):
		"""Write the mask as a black and white PNG on the latent grid."""
		array = self.data.cpu().numpy().astype(np.uint8) * 255
		Image.fromarray(array, mode='L').save(path, format='PNG')

	def __repr__(self):
		return '<%s %s %d set>' % (type(self).__name__, self.grid, self.count)


def aggregate_attention(captures):
	"""Mean of the selected-token maps over all captures, layers, heads and tokens."""
	grids = {c.grid for c in captures}
	if len(grids) != 1:
		raise ShapeError('Attention captures are on different grids: %s' % sorted(grids))
	return torch.stack([c.mean_map() for c in captures]).mean(dim=0)


def extract_object_mask(captures, token_indices, threshold=0.5):
	"""Derive the object mask from cross-attention captures.

	The aggregate map is min-max normalized to [0, 1] and thresholded with
	``>=``. A constant aggregate map gives the all-ones mask.

	Parameters
	----------
	captures : list of .AttentionCapture
	token_indices : list of int
		Tokens of the object word; must be the tokens the captures hold.
	threshold : float

	Returns
	-------
	.ObjectMask

	Raises
	------
	.ContractError
		If ``captures`` is empty or the captures hold other tokens.
	"""
	captures = list(captures)
	if not captures:
		raise ContractError('No attention captures to build a mask from')
	check_unit_interval(threshold, 'Mask threshold')
	token_indices = list(token_indices)
	for c in captures:
		if c.token_indices != token_indices:
			raise ContractError('Capture holds tokens %r, expected %r' % (c.token_indices, token_indices))

	agg = aggregate_attention(captures).double()
	lo, hi = agg.min(), agg.max()

	if hi - lo <= 0:
		logger.warning('Attention map for tokens %r is constant, using the full mask', token_indices)
		return ObjectMask(torch.ones(agg.shape, dtype=torch.bool), token_indices, threshold, torch.ones_like(agg))

	norm = (agg - lo) / (hi - lo)
	mask = ObjectMask(norm >= threshold, token_indices, threshold, norm)
	logger.debug('Object mask covers %d of %d locations', mask.count, norm.numel())
	return mask
