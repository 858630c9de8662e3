"""Latent deviation: carrying an x0-space edit into the latent trajectory.

For a step ``t -> t_prev`` with path latent ``x_t``, its noise prediction
``eps(x_t)``, predicted x0 ``x0`` and transfer residual ``T``:

	x'_t   = sqrt(a_t) * (x0 + T) + sqrt(1 - a_t) * eps(x_t)
	x*_t   = lambda * x_t + (1 - lambda) * x'_t
	eps*   = gamma * eps(x_t) + (1 - gamma) * eps(x'_t)
	x*_t-1 = ddim_step(x*_t, eps*, t, t_prev)

:func:`closed_form_step` and :func:`kappa_form_step` give the same result
without stepping through the intermediates.
"""

import math

import torch

from .errors import ContractError, check_same_shape, check_unit_interval
from .schedule import ddim_step, predict_x0


#: Tolerance for checking a given x0 against the prediction from its latent.
X0_RTOL = 1e-4
X0_ATOL = 1e-5


class DeviationStep:
	"""Intermediates of one deviated step.

	Attributes
	----------
	t : int
	t_prev : int
	x_t : torch.Tensor
	x_t_prime : torch.Tensor
	x_t_star : torch.Tensor
	eps_xt : torch.Tensor
	eps_xt_prime : torch.Tensor
	eps_star : torch.Tensor
	x_prev_star : torch.Tensor
	lambda_ : float
	gamma : float
	"""

	ARRAYS = ('x_t', 'x_t_prime', 'x_t_star', 'eps_xt', 'eps_xt_prime', 'eps_star', 'x_prev_star')

	def __init__(self, t, t_prev, x_t, x_t_prime, x_t_star, eps_xt, eps_xt_prime, eps_star, x_prev_star,
	             lambda_, gamma):
		self.t = t
		self.t_prev = t_prev
		self.x_t = x_t
		self.x_t_prime = x_t_prime
		self.x_t_star = x_t_star
		self.eps_xt = eps_xt
		self.eps_xt_prime = eps_xt_prime
		self.eps_star = eps_star
		self.x_prev_star = x_prev_star
		self.lambda_ = lambda_
		self.gamma = gamma

	def arrays(self):
		"""Mapping from field name to tensor, for diagnostic dumps."""
		return {name: getattr(self, name) for name in self.ARRAYS}

	def __repr__(self):
		return '<%s t=%d -> %d>' % (type(self).__name__, self.t, self.t_prev)


def deviate_latent(x0, tdelta, eps_xt, t, s, x_t=None):
	"""Lift an x0-space residual to timestep ``t``.

	``x'_t = sqrt(a_t) * (x0 + T) + sqrt(1 - a_t) * eps(x_t)``

	Parameters
	----------
	x0 : torch.Tensor
	tdelta : torch.Tensor
		Transfer residual ``T``.
	eps_xt : torch.Tensor
	t : int
	s : .Schedule
	x_t : torch.Tensor
		Optional path latent with ``x0 == predict_x0(x_t, eps_xt, t)``. If given
		the result is computed as ``x_t + sqrt(a_t) * T``, which is the same
		value but reproduces ``x_t`` exactly when ``T`` is zero.

	Returns
	-------
	torch.Tensor
		Same dtype as ``x_t`` (or ``x0``).
	"""
	check_same_shape(x0, tdelta, eps_xt)
	a = s.alpha(t)
	if x_t is not None:
		check_same_shape(x_t, tdelta)
		return (x_t + math.sqrt(a) * tdelta).to(x_t.dtype)
	return (math.sqrt(a) * (x0 + tdelta) + math.sqrt(1. - a) * eps_xt).to(x0.dtype)


def blend_latent(x_t, x_t_prime, lambda_):
	"""``lambda * x_t + (1 - lambda) * x'_t``, exact at both endpoints."""
	check_same_shape(x_t, x_t_prime)
	check_unit_interval(lambda_, 'lambda')
	return torch.lerp(x_t_prime, x_t, lambda_)


def blend_noise(eps_xt, eps_xt_prime, gamma):
	"""``gamma * eps(x_t) + (1 - gamma) * eps(x'_t)``, exact at both endpoints."""
	check_same_shape(eps_xt, eps_xt_prime)
	check_unit_interval(gamma, 'gamma')
	return torch.lerp(eps_xt_prime, eps_xt, gamma)


def _check_window(t, params, s):
	i = s.index(t)
	if not params.in_window(i):
		raise ContractError('Step %d (t=%d) is outside of the deviation window [%d, %d)' % (
			i, t, params.start_step, params.end_step))


def _check_x0(x_t, x0, eps_xt, t, s):
	check_same_shape(x_t, x0)
	if not torch.allclose(predict_x0(x_t, eps_xt, t, s), x0.to(x_t.dtype), rtol=X0_RTOL, atol=X0_ATOL):
		raise ContractError('x0 is not the predicted x0 of x_t at t=%d' % t)


def deviation_step(x_t, x0, tdelta, t, t_prev, params, s, b, conditioning, eps_xt=None):
	"""Run one deviated denoising step.

	Parameters
	----------
	x_t : torch.Tensor
		Incoming path latent.
	x0 : torch.Tensor
		Predicted x0 of ``x_t`` under ``eps_xt``.
	tdelta : torch.Tensor
		Transfer residual.
	t : int
	t_prev : int
	params : .TransferParams
	s : .Schedule
	b : .DiffusionBackend
	conditioning : .Conditioning
		Conditioning of the replay pass at this step, also used for ``x'_t``.
	eps_xt : torch.Tensor
		Replay-pass prediction at ``x_t``. Computed if None.

	Returns
	-------
	.DeviationStep

	Raises
	------
	.ContractError
		If ``t`` is outside of the deviation window of ``params`` or ``x0`` is
		not the predicted x0 of ``x_t``.
	"""
	_check_window(t, params, s)
	if eps_xt is None:
		eps_xt = conditioning.predict(b, x_t, t)
	_check_x0(x_t, x0, eps_xt, t, s)

	x_t_prime = deviate_latent(x0, tdelta, eps_xt, t, s, x_t=x_t)
	if torch.equal(x_t_prime, x_t):
		eps_xt_prime = eps_xt
	else:
		eps_xt_prime = conditioning.predict(b, x_t_prime, t)

	x_t_star = blend_latent(x_t, x_t_prime, params.lambda_)
	eps_star = blend_noise(eps_xt, eps_xt_prime, params.gamma)
	x_prev_star = ddim_step(x_t_star, eps_star, t, t_prev, s)

	return DeviationStep(t, t_prev, x_t, x_t_prime, x_t_star, eps_xt, eps_xt_prime, eps_star, x_prev_star,
	                     params.lambda_, params.gamma)


def direct_step(x_t, x0, tdelta, t, t_prev, params, s, eps_xt):
	"""Step with the transferred x0 in place of the predicted one, without deviation.

	``x_t-1 = sqrt(a_prev) * (x0 + T) + sqrt(1 - a_prev) * eps(x_t)``

	This is :func:`deviation_step` with ``lambda = 0`` and ``gamma = 1``, minus
	the evaluation of the noise at the deviated latent.

	Returns
	-------
	.DeviationStep
		The deviated noise fields hold ``eps_xt``.
	"""
	_check_window(t, params, s)
	_check_x0(x_t, x0, eps_xt, t, s)

	x_t_prime = deviate_latent(x0, tdelta, eps_xt, t, s, x_t=x_t)
	x_prev = ddim_step(x_t_prime, eps_xt, t, t_prev, s)
	return DeviationStep(t, t_prev, x_t, x_t_prime, x_t_prime, eps_xt, eps_xt, eps_xt, x_prev, 0., 1.)


def closed_form_step(x0, tdelta, eps_xt, eps_star, t, t_prev, lambda_, s):
	"""Deviated step as a shift in the x0 space.

	``sqrt(a_prev) * (x0 + (1 - lambda) * T) + sqrt(1 - a_prev) * eps*
	+ sqrt(a_prev * (1 - a_t) / a_t) * (eps(x_t) - eps*)``

	Equal to :func:`.deviation_step` when ``x0`` is the predicted x0 of the
	path latent under ``eps_xt``.
	"""
	check_same_shape(x0, tdelta, eps_xt, eps_star)
	check_unit_interval(lambda_, 'lambda')
	a_t, a_prev = s.alpha(t), s.alpha(t_prev)
	x = (
		math.sqrt(a_prev) * (x0 + (1. - lambda_) * tdelta)
		+ math.sqrt(1. - a_prev) * eps_star
		+ math.sqrt(a_prev * (1. - a_t) / a_t) * (eps_xt - eps_star)
	)
	return x.to(x0.dtype)


def kappa(t, t_prev, s):
	"""Noise coefficient of a DDIM step written in terms of the input latent.

	``ddim_step(x, eps) = sqrt(a_prev / a_t) * x + kappa * eps``
	"""
	a_t, a_prev = s.alpha(t), s.alpha(t_prev)
	return math.sqrt(1. - a_prev) - math.sqrt(a_prev * (1. - a_t) / a_t)


def kappa_form_step(x_t, x_t_prime, eps_xt, eps_xt_prime, t, t_prev, lambda_, gamma, s):
	"""Deviated step from the blended inputs, ``sqrt(a_prev / a_t) * x*_t + kappa * eps*``."""
	x_star = blend_latent(x_t, x_t_prime, lambda_)
	eps_star = blend_noise(eps_xt, eps_xt_prime, gamma)
	return math.sqrt(s.alpha(t_prev) / s.alpha(t)) * x_star + kappa(t, t_prev, s) * eps_star
