"""Build latent trajectories of real images.

The target image is inverted with plain DDIM inversion. The source image is
inverted with null-text inversion: DDIM inversion gives pivot latents, then the
unconditional embedding is optimized per step so that guided sampling retraces
the pivots.
"""

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from tqdm import tqdm

from .backend import TextEmbedding, Conditioning
from .errors import ContractError, ConfigError, ShapeError
from .schedule import FINAL, ddim_step, ddim_inverse_step, predict_x0


logger = logging.getLogger(__name__)


@dataclass
class NullTextConfig:
	"""Settings of the per-step unconditional embedding optimization.

	Attributes
	----------
	iterations_per_step : int
	learning_rate : float
		Initial Adam learning rate, decayed linearly over the steps.
	early_stop_epsilon : float
		Optimization of a step stops once the reconstruction MSE falls below
		this. Also the tolerance of the per-step replay check.
	"""
	iterations_per_step: int = 10
	learning_rate: float = 1e-2
	early_stop_epsilon: float = 1e-5

	def __post_init__(self):
		if self.iterations_per_step <= 0 or self.learning_rate <= 0 or self.early_stop_epsilon <= 0:
			raise ConfigError('Null-text settings must all be positive: %r' % (self,))


class TrajectoryEntry:
	"""One step of a latent trajectory.

	Attributes
	----------
	timestep : int
	latent : torch.Tensor
		The path latent ``x_t``.
	noise : torch.Tensor
		Noise prediction used to produce ``latent``.
	predicted_x0 : torch.Tensor
		``predict_x0(latent, noise, timestep)``.
	uncond_embedding : .TextEmbedding or None
		Optimized unconditional embedding (source trajectories only).
	"""

	__slots__ = ('timestep', 'latent', 'noise', 'predicted_x0', 'uncond_embedding')

	def __init__(self, timestep, latent, noise, predicted_x0, uncond_embedding=None):
		self.timestep = timestep
		self.latent = latent
		self.noise = noise
		self.predicted_x0 = predicted_x0
		self.uncond_embedding = uncond_embedding

	def __repr__(self):
		return '<%s t=%d>' % (type(self).__name__, self.timestep)


class LatentTrajectory:
	"""Per-step record of an inverted image.

	Entries are stored in sampling order (noisiest first), so entry ``i``
	belongs to ``schedule.timesteps[i]``.

	Attributes
	----------
	kind : str
		``'source'`` (null-text inversion) or ``'target'`` (DDIM inversion).
	prompt : str
	guidance_scale : float
		Guidance scale that replays this trajectory.
	clean_latent : torch.Tensor
		Encoding of the image.
	entries : list of .TrajectoryEntry
	residuals : list of float
		Per-step max-abs replay error against the pivots, if checked.
	losses : list of float
		Final optimization loss per step (source trajectories).
	"""

	KINDS = ('source', 'target')

	def __init__(self, kind, prompt, guidance_scale, clean_latent, entries, residuals=None, losses=None):
		if kind not in self.KINDS:
			raise ValueError('Trajectory kind must be one of %r' % (self.KINDS,))
		self.kind = kind
		self.prompt = prompt
		self.guidance_scale = guidance_scale
		self.clean_latent = clean_latent
		self.entries = list(entries)
		self.residuals = None if residuals is None else list(residuals)
		self.losses = None if losses is None else list(losses)

	def __len__(self):
		return len(self.entries)

	def __iter__(self):
		return iter(self.entries)

	def __getitem__(self, i):
		return self.entries[i]

	def __repr__(self):
		return '<%s %s %d steps>' % (type(self).__name__, self.kind, len(self))

	@property
	def timesteps(self):
		return [e.timestep for e in self.entries]

	@property
	def top(self):
		"""Noisiest latent of the trajectory."""
		return self.entries[0].latent

	@property
	def uncond_embeddings(self):
		return [e.uncond_embedding for e in self.entries]

	def entry_at(self, t):
		for e in self.entries:
			if e.timestep == t:
				return e
		raise KeyError(t)

	def validate(self, s):
		"""Check the trajectory invariants against a schedule.

		Raises
		------
		.ContractError
		"""
		if self.timesteps != list(s.timesteps):
			raise ContractError('Trajectory timesteps do not match the schedule')
		has_embeddings = [e.uncond_embedding is not None for e in self.entries]
		if self.kind == 'source' and not all(has_embeddings):
			raise ContractError('Source trajectory is missing unconditional embeddings')
		if self.kind == 'target' and any(has_embeddings):
			raise ContractError('Target trajectory must not carry unconditional embeddings')

	def conditioning(self, b, step):
		"""Conditioning which replays step ``step`` of this trajectory."""
		cond = b.embed_text(self.prompt)
		if self.kind == 'target':
			return Conditioning(cond, None, 1.)
		uncond = self.entries[step].uncond_embedding
		if uncond is None:
			raise ContractError('Source trajectory is missing the unconditional embedding of step %d' % step)
		return Conditioning(cond, uncond, self.guidance_scale)


def _invert_latent(clean, cond, s, b, fixed_point_iterations=10, fixed_point_tolerance=1e-7, progress=True):
	"""DDIM inversion of a clean latent with the unguided conditional prediction.

	Each step is refined by fixed-point iteration so that the stored noise is
	the prediction at the stored latent.

	Returns
	-------
	list of tuple
		``(t, latent, noise)`` in sampling order (noisiest first).
	"""
	x = clean
	t_cur = FINAL
	out = []

	for t in tqdm(list(reversed(s.timesteps)), desc='DDIM inversion', disable=not progress, leave=False):
		eps = b.predict_noise_single(x, t, cond)
		x_next = ddim_inverse_step(x, eps, t_cur, t, s)

		for _ in range(fixed_point_iterations):
			eps = b.predict_noise_single(x_next, t, cond)
			refined = ddim_inverse_step(x, eps, t_cur, t, s)
			change = (refined - x_next).abs().max().item()
			x_next = refined
			if change < fixed_point_tolerance:
				break

		out.append((t, x_next, eps))
		x, t_cur = x_next, t

	out.reverse()
	return out


def ddim_invert(image, prompt, s, b, fixed_point_iterations=10, fixed_point_tolerance=1e-7, progress=True):
	"""Invert an image with DDIM inversion under its prompt (guidance scale 1).

	Parameters
	----------
	image : numpy.ndarray
		RGB image accepted by ``b.encode_image``.
	prompt : str
	s : .Schedule
	b : .DiffusionBackend
	fixed_point_iterations : int
		Maximum refinement iterations per step (0 for classic DDIM inversion).
	fixed_point_tolerance : float
	progress : bool
		Show a progress bar.

	Returns
	-------
	.LatentTrajectory
		Target trajectory with ``predicted_x0`` recorded at every step.
	"""
	clean = b.encode_image(image)
	cond = b.embed_text(prompt)
	with torch.no_grad():
		steps = _invert_latent(clean, cond, s, b, fixed_point_iterations, fixed_point_tolerance, progress)

	entries = [TrajectoryEntry(t, x, eps, predict_x0(x, eps, t, s)) for t, x, eps in steps]
	return LatentTrajectory('target', prompt, 1., clean, entries)


def _step_target(traj_steps, clean, i):
	return traj_steps[i + 1][1] if i + 1 < len(traj_steps) else clean


def null_text_invert(image, prompt, s, b, cfg=None, guidance_scale=7.5, fixed_point_iterations=10,
                     fixed_point_tolerance=1e-7, progress=True):
	"""Null-text inversion of an image.

	Parameters
	----------
	image : numpy.ndarray
	prompt : str
	s : .Schedule
	b : .DiffusionBackend
	cfg : .NullTextConfig
	guidance_scale : float
		Guidance scale the trajectory is tuned to be replayed with.
	fixed_point_iterations : int
	fixed_point_tolerance : float
	progress : bool

	Returns
	-------
	.LatentTrajectory
		Source trajectory. Entries hold the DDIM pivots and the optimized
		unconditional embedding of each step.
	"""
	cfg = NullTextConfig() if cfg is None else cfg
	clean = b.encode_image(image)
	cond = b.embed_text(prompt)
	uncond = b.embed_text('').data.detach().clone()

	with torch.no_grad():
		pivots = _invert_latent(clean, cond, s, b, fixed_point_iterations, fixed_point_tolerance, progress)

	entries = []
	losses = []
	residuals = []
	x = pivots[0][1]

	for i, (t, pivot, pivot_eps) in enumerate(tqdm(pivots, desc='Null-text optimization', disable=not progress, leave=False)):
		t_prev = s.prev_timestep(t)
		target = _step_target(pivots, clean, i)

		with torch.no_grad():
			eps_cond = b.predict_noise_single(x, t, cond)

		emb = uncond.clone().requires_grad_(b.supports_embedding_grad)
		optimizer = None
		if b.supports_embedding_grad:
			lr = cfg.learning_rate * max(1. - i / 100., 0.01)
			optimizer = torch.optim.Adam([emb], lr=lr)

		for _ in range(cfg.iterations_per_step):
			with torch.set_grad_enabled(optimizer is not None):
				eps_uncond = b.predict_noise_single(x, t, TextEmbedding(emb, 'unconditional'))
				eps = eps_uncond + guidance_scale * (eps_cond - eps_uncond)
				loss = F.mse_loss(ddim_step(x, eps, t, t_prev, s), target)

			loss_value = loss.item()
			if loss_value < cfg.early_stop_epsilon or optimizer is None:
				break
			optimizer.zero_grad()
			loss.backward()
			optimizer.step()

		uncond = emb.detach()
		uncond_emb = TextEmbedding(uncond.clone(), 'unconditional')

		with torch.no_grad():
			eps = b.predict_noise(x, t, cond, uncond_emb, guidance_scale)
			x = ddim_step(x, eps, t, t_prev, s)

		residuals.append((x - target).abs().max().item())
		losses.append(loss_value)
		entries.append(TrajectoryEntry(t, pivot, pivot_eps, predict_x0(pivot, pivot_eps, t, s), uncond_emb))

	failed = [r for r in residuals if r >= cfg.early_stop_epsilon]
	if failed:
		logger.warning(
			'Null-text inversion did not reach epsilon %g at %d of %d steps (max residual %g)',
			cfg.early_stop_epsilon, len(failed), len(residuals), max(failed),
		)

	return LatentTrajectory('source', prompt, guidance_scale, clean, entries, residuals=residuals, losses=losses)


def replay_path(traj, s, b, progress=True):
	"""Denoise from the top of a trajectory with its stored conditioning.

	Returns
	-------
	list of torch.Tensor
		Latent after each step, the last being the clean latent.
	"""
	traj.validate(s)
	x = traj.top
	path = []
	with torch.no_grad():
		for i, t in enumerate(tqdm(s.timesteps, desc='Replay', disable=not progress, leave=False)):
			eps = traj.conditioning(b, i).predict(b, x, t)
			x = ddim_step(x, eps, t, s.prev_timestep(t), s)
			path.append(x)
	return path


def replay_reconstruction(traj, s, b, progress=True):
	"""Reconstruct the clean latent by replaying a trajectory.

	Parameters
	----------
	traj : .LatentTrajectory
	s : .Schedule
	b : .DiffusionBackend
	progress : bool

	Returns
	-------
	torch.Tensor

	Raises
	------
	.ContractError
		If a source trajectory lacks its unconditional embeddings.
	"""
	return replay_path(traj, s, b, progress)[-1]


def replay_errors(traj, s, b):
	"""Max-abs error between each replayed latent and the trajectory's own next latent."""
	path = replay_path(traj, s, b, progress=False)
	targets = [e.latent for e in traj.entries[1:]] + [traj.clean_latent]
	for x, target in zip(path, targets):
		if x.shape != target.shape:
			raise ShapeError('Replay produced shape %s, expected %s' % (tuple(x.shape), tuple(target.shape)))
	return [(x - target).abs().max().item() for x, target in zip(path, targets)]
