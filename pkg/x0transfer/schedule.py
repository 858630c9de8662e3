"""DDIM timestep bookkeeping and the algebraic maps between x_t, x0 and noise.

Latents are plain :class:`torch.Tensor` objects of shape ``(channels, height, width)``.
All functions preserve the dtype of their inputs, coefficients are computed in
double precision from the :class:`.Schedule`.
"""

import hashlib
import json
import math

import torch

from .errors import UnknownTimestepError, OrderingError, ConfigError, check_same_shape


#: Pseudo-timestep marking the clean end of a trajectory (after the last sampling step).
FINAL = -1


def make_alphas_cumprod(num_train_timesteps=1000, beta_start=0.00085, beta_end=0.012,
                        beta_schedule='scaled_linear'):
	"""Cumulative signal coefficients over the full training range.

	Parameters
	----------
	num_train_timesteps : int
	beta_start : float
	beta_end : float
	beta_schedule : str
		``'scaled_linear'`` (Stable Diffusion) or ``'linear'``.

	Returns
	-------
	torch.Tensor
		Double precision tensor of length ``num_train_timesteps``.
	"""
	if beta_schedule == 'scaled_linear':
		betas = torch.linspace(beta_start ** 0.5, beta_end ** 0.5, num_train_timesteps, dtype=torch.float64) ** 2
	elif beta_schedule == 'linear':
		betas = torch.linspace(beta_start, beta_end, num_train_timesteps, dtype=torch.float64)
	else:
		raise ConfigError('Unknown beta schedule %r' % beta_schedule)

	return torch.cumprod(1. - betas, dim=0)


class Schedule:
	"""A DDIM sampling grid together with its cumulative signal coefficients.

	The coefficient called ``a_t`` everywhere in this package is the cumulative
	product of ``1 - beta`` (``alphas_cumprod`` in diffusers terms).

	Attributes
	----------
	alphas_cumprod : torch.Tensor
		Coefficient for every timestep of the training range (float64).
	timesteps : tuple of int
		Sampling timesteps in descending order.
	final_alpha_cumprod : float
		Coefficient used for :data:`.FINAL`, the clean end of the path.
	"""

	def __init__(self, alphas_cumprod, timesteps, final_alpha_cumprod=1.0):
		self.alphas_cumprod = torch.as_tensor(alphas_cumprod, dtype=torch.float64).flatten()
		self.timesteps = tuple(int(t) for t in timesteps)
		self.final_alpha_cumprod = float(final_alpha_cumprod)
		self._index = {t: i for i, t in enumerate(self.timesteps)}
		self._validate()

	def _validate(self):
		if not self.timesteps:
			raise ConfigError('Schedule needs at least one timestep')

		for t0, t1 in zip(self.timesteps, self.timesteps[1:]):
			if t1 >= t0:
				raise ConfigError('Timesteps must be strictly descending, got %d before %d' % (t0, t1))

		ntrain = len(self.alphas_cumprod)
		if self.timesteps[0] >= ntrain or self.timesteps[-1] < 0:
			raise ConfigError('Timesteps must lie within the training range [0, %d)' % ntrain)

		alphas = [self.alpha(t) for t in self.timesteps] + [self.final_alpha_cumprod]
		for a in alphas:
			if not 0 < a <= 1:
				raise ConfigError('Signal coefficients must lie in (0, 1], got %r' % a)
		for a0, a1 in zip(alphas, alphas[1:]):
			if a1 <= a0:
				raise ConfigError('Signal coefficients must increase as the timestep decreases')

	@classmethod
	def ddim(cls, num_sample_steps=50, num_train_timesteps=1000, beta_start=0.00085, beta_end=0.012,
	         beta_schedule='scaled_linear', steps_offset=1, set_alpha_to_one=True):
		"""Uniform-stride DDIM grid as used with Stable Diffusion.

		Parameters
		----------
		num_sample_steps : int
		num_train_timesteps : int
		beta_start : float
		beta_end : float
		beta_schedule : str
		steps_offset : int
			Added to every timestep of the grid.
		set_alpha_to_one : bool
			Whether the clean end of the path uses a coefficient of exactly 1.
			Otherwise the coefficient of timestep 0 is used.

		Returns
		-------
		.Schedule
		"""
		if num_sample_steps < 1 or num_sample_steps > num_train_timesteps:
			raise ConfigError('num_sample_steps must be in [1, %d]' % num_train_timesteps)

		alphas = make_alphas_cumprod(num_train_timesteps, beta_start, beta_end, beta_schedule)
		stride = num_train_timesteps // num_sample_steps
		timesteps = [i * stride + steps_offset for i in reversed(range(num_sample_steps))]
		final = 1.0 if set_alpha_to_one else float(alphas[0])
		return cls(alphas, timesteps, final_alpha_cumprod=final)

	@property
	def num_sample_steps(self):
		return len(self.timesteps)

	@property
	def num_train_timesteps(self):
		return len(self.alphas_cumprod)

	def __len__(self):
		return len(self.timesteps)

	def __contains__(self, t):
		return t == FINAL or t in self._index

	def __repr__(self):
		return '<%s %d steps, t=%d..%d>' % (
			type(self).__name__, len(self), self.timesteps[0], self.timesteps[-1]
		)

	def index(self, t):
		"""Position of timestep ``t`` in :attr:`timesteps`."""
		try:
			return self._index[t]
		except KeyError:
			raise UnknownTimestepError('Timestep %r is not on the sampling grid' % (t,)) from None

	def alpha(self, t):
		"""Cumulative signal coefficient of a grid timestep (or :data:`.FINAL`).

		Raises
		------
		.UnknownTimestepError
		"""
		if t == FINAL:
			return self.final_alpha_cumprod
		self.index(t)
		return float(self.alphas_cumprod[t])

	def train_alpha(self, t):
		"""Coefficient of any timestep of the training range, on the grid or not."""
		if not 0 <= t < self.num_train_timesteps:
			raise UnknownTimestepError('Timestep %r is outside the training range' % (t,))
		return float(self.alphas_cumprod[t])

	def prev_timestep(self, t):
		"""The timestep following ``t`` in the denoising direction (:data:`.FINAL` after the last)."""
		i = self.index(t)
		return self.timesteps[i + 1] if i + 1 < len(self.timesteps) else FINAL

	def next_timestep(self, t):
		"""The timestep following ``t`` in the inversion (noising) direction."""
		if t == FINAL:
			return self.timesteps[-1]
		i = self.index(t)
		if i == 0:
			raise OrderingError('Timestep %d is already the noisiest on the grid' % t)
		return self.timesteps[i - 1]

	def fingerprint(self):
		"""Stable hash of the schedule contents, for use in cache keys."""
		h = hashlib.sha256()
		h.update(json.dumps({'timesteps': self.timesteps, 'final': self.final_alpha_cumprod}).encode())
		h.update(self.alphas_cumprod.numpy().tobytes())
		return h.hexdigest()


def _order(t):
	# FINAL sorts below every real timestep
	return -1 if t == FINAL else t


def predict_x0(x_t, eps, t, s):
	"""Clean-data estimate from a noisy latent and its noise prediction.

	``x0 = (x_t - sqrt(1 - a_t) * eps) / sqrt(a_t)``

	Parameters
	----------
	x_t : torch.Tensor
	eps : torch.Tensor
	t : int
	s : .Schedule

	Returns
	-------
	torch.Tensor
	"""
	check_same_shape(x_t, eps)
	a = s.alpha(t)
	return (x_t - math.sqrt(1. - a) * eps) / math.sqrt(a)


def compose_latent(x0, eps, t, s):
	"""Noisy latent from clean data and noise, ``sqrt(a_t) * x0 + sqrt(1 - a_t) * eps``."""
	check_same_shape(x0, eps)
	a = s.alpha(t)
	return math.sqrt(a) * x0 + math.sqrt(1. - a) * eps


def _transition(x, eps, t_from, t_to, s):
	a_from = s.alpha(t_from)
	a_to = s.alpha(t_to)
	if a_to == a_from:
		return x.clone()
	x0 = (x - math.sqrt(1. - a_from) * eps) / math.sqrt(a_from)
	return math.sqrt(a_to) * x0 + math.sqrt(1. - a_to) * eps


def ddim_step(x_t, eps, t, t_prev, s):
	"""Deterministic DDIM update from timestep ``t`` to the less noisy ``t_prev``.

	Parameters
	----------
	x_t : torch.Tensor
	eps : torch.Tensor
		Noise prediction at ``(x_t, t)``.
	t : int
	t_prev : int
		Timestep to step to. May equal ``t``, giving an exact no-op.
	s : .Schedule

	Returns
	-------
	torch.Tensor

	Raises
	------
	.OrderingError
		If ``t_prev`` is noisier than ``t``.
	"""
	check_same_shape(x_t, eps)
	if _order(t_prev) > _order(t):
		raise OrderingError('ddim_step goes towards less noise, got %d -> %d' % (t, t_prev))
	return _transition(x_t, eps, t, t_prev, s)


def ddim_inverse_step(x_t, eps, t, t_next, s):
	"""Deterministic DDIM inversion step from ``t`` to the noisier ``t_next``.

	Exact inverse of :func:`.ddim_step` when the same ``eps`` is used both ways.
	"""
	check_same_shape(x_t, eps)
	if _order(t_next) < _order(t):
		raise OrderingError('ddim_inverse_step goes towards more noise, got %d -> %d' % (t, t_next))
	return _transition(x_t, eps, t, t_next, s)
