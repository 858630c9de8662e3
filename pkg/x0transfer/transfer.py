"""Mask-wise appearance transfer in the x0 space."""

from dataclasses import dataclass
from typing import Optional

import torch

from .errors import ShapeError, ConfigError, DomainError, check_same_shape, check_unit_interval
from .masking import ObjectMask
from .matching import MODES


@dataclass
class TransferParams:
	"""Parameters of one transfer run.

	Attributes
	----------
	delta : float
		Weight of the aligned target in the transferred x0.
	lambda_ : float
		Weight of the original path latent when blending latents.
	gamma : float
		Weight of the original path noise when blending noise predictions.
	start_step : int
		Index of the first deviated sampling step.
	end_step : int
		Index one past the last deviated step.
	matching_mode : str
		``'progressive'`` or ``'initial'``.
	mask_threshold : float
	match_threshold : float
		Optional minimum match score; None disables filtering.
	semantic_matching : bool
		Match the target to the source. If False the target x0 is used at the
		same locations, through the identity correspondence.
	latent_deviation : bool
		Deviate the latent path with the lambda and gamma blends. If False the
		transferred x0 is recomposed with the path noise and stepped directly.
	"""
	delta: float = 0.6
	lambda_: float = 0.2
	gamma: float = 0.2
	start_step: int = 12
	end_step: int = 21
	matching_mode: str = 'progressive'
	mask_threshold: float = 0.5
	match_threshold: Optional[float] = None
	semantic_matching: bool = True
	latent_deviation: bool = True

	def __post_init__(self):
		for name in ('delta', 'lambda_', 'gamma', 'mask_threshold'):
			try:
				check_unit_interval(getattr(self, name), name)
			except DomainError as exc:
				raise ConfigError(str(exc)) from None
		if self.match_threshold is not None and not -1 <= self.match_threshold <= 1:
			raise ConfigError('match_threshold must be in [-1, 1], got %r' % self.match_threshold)
		if self.matching_mode not in MODES:
			raise ConfigError('matching_mode must be one of %r, got %r' % (MODES, self.matching_mode))
		if not 0 <= self.start_step < self.end_step:
			raise ConfigError('Need 0 <= start_step < end_step, got %d and %d' % (self.start_step, self.end_step))

	def check_steps(self, num_sample_steps):
		"""Raise :class:`.ConfigError` if the window does not fit the schedule."""
		if self.end_step > num_sample_steps:
			raise ConfigError('end_step %d exceeds the %d sampling steps' % (self.end_step, num_sample_steps))

	def in_window(self, i):
		return self.start_step <= i < self.end_step


def _mask_tensor(m):
	return m.data if isinstance(m, ObjectMask) else m.bool()


def transfer_x0(x0_src, x0_tar_aligned, m, delta):
	"""Blend the aligned target into the source inside the mask.

	``x0' = M * ((1 - delta) * x0_src + delta * x0_tar_aligned) + (1 - M) * x0_src``

	Locations outside the mask are copied from ``x0_src`` unchanged.

	Parameters
	----------
	x0_src : torch.Tensor
	x0_tar_aligned : torch.Tensor
		Output of :func:`.apply_correlation`.
	m : .ObjectMask or torch.Tensor
		Mask over the spatial grid, broadcast over channels.
	delta : float

	Returns
	-------
	torch.Tensor
	"""
	check_same_shape(x0_src, x0_tar_aligned)
	check_unit_interval(delta, 'delta')
	mask = _mask_tensor(m)
	if tuple(mask.shape) != tuple(x0_src.shape[-2:]):
		raise ShapeError('Mask grid %s does not match latent grid %s' % (tuple(mask.shape), tuple(x0_src.shape[-2:])))
	return torch.where(mask, torch.lerp(x0_src, x0_tar_aligned, delta), x0_src)


def transfer_delta(x0_prime, x0):
	"""The transformation from ``x0`` to ``x0_prime`` as a residual.

	The residual is taken in double precision, where the difference of two
	single precision tensors is exact. ``x0 + T`` therefore reproduces
	``x0_prime`` exactly, and also after casting back to ``x0.dtype``.

	Returns
	-------
	torch.Tensor
		``float64`` tensor.
	"""
	check_same_shape(x0_prime, x0)
	return x0_prime.double() - x0.double()
