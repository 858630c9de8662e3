"""End-to-end appearance transfer runs.

A run inverts the source image with null-text inversion and the target image
with DDIM inversion, then denoises the source from the top of its trajectory.
Inside the deviation window every step matches the predicted x0 of the source
against the stored one of the target, transfers appearance inside the object
mask and deviates the latent path. All other steps replay the source path.
"""

import re
import time
import logging
from pathlib import Path
from collections import ChainMap
from contextlib import contextmanager
from dataclasses import dataclass, field, replace, asdict
from typing import Optional

import numpy as np
import torch
from PIL import Image, ImageOps
from tqdm import tqdm

from . import __version__
from .backend import get_backend
from .cache import TrajectoryCache, TrajectoryKey, default_cache_dir
from .deviation import deviation_step, direct_step
from .errors import ConfigError, ContractError, StageError, X0TransferError
from .inversion import NullTextConfig, ddim_invert, null_text_invert, replay_reconstruction
from .io import write_array, write_json, to_jsonable
from .masking import ObjectMask, extract_object_mask
from .matching import CorrelationMap, SemanticMatcher, apply_correlation, DEFAULT_DIFT_TIMESTEP
from .schedule import Schedule, ddim_step, predict_x0
from .transfer import TransferParams, transfer_x0, transfer_delta


logger = logging.getLogger(__name__)


#: Built-in defaults of every configuration key. Keys equal the CLI flag names.
DEFAULT_CONFIG = {
	'source': None,
	'target': None,
	'source_prompt': '',
	'target_prompt': '',
	'object_word': '',
	'delta': 0.6,
	'lambda': 0.2,
	'gamma': 0.2,
	'start_step': 12,
	'end_step': 21,
	'matching': 'progressive',
	'mask_threshold': 0.5,
	'match_threshold': None,
	'semantic_matching': True,
	'latent_deviation': True,
	'mask_path': None,
	'backend': 'mock',
	'model_id': 'CompVis/stable-diffusion-v1-4',
	'device': None,
	'guidance_scale': 7.5,
	'dift_layer': None,
	'dift_timestep': DEFAULT_DIFT_TIMESTEP,
	'attention_resolution': 16,
	'num_sample_steps': 50,
	'null_text_iterations': 10,
	'null_text_learning_rate': 1e-2,
	'null_text_epsilon': 1e-5,
	'fixed_point_iterations': 10,
	'mock_latent_shape': [4, 16, 16],
	'mock_noise_scale': 1.0,
	'mock_kernel_size': 3,
	'cache_dir': None,
	'use_cache': True,
	'out_dir': 'out',
	'seed': 0,
	'dump_diagnostics': False,
	'export_mask': False,
}


@dataclass
class ScheduleConfig:
	"""Settings of the DDIM sampling grid, see :meth:`.Schedule.ddim`."""
	num_sample_steps: int = 50
	num_train_timesteps: int = 1000
	beta_start: float = 0.00085
	beta_end: float = 0.012
	beta_schedule: str = 'scaled_linear'
	steps_offset: int = 1
	set_alpha_to_one: bool = True

	def build(self):
		return Schedule.ddim(**asdict(self))


@dataclass
class BackendConfig:
	"""Which backend to use and how to construct it."""
	name: str = 'mock'
	model_id: str = 'CompVis/stable-diffusion-v1-4'
	device: Optional[str] = None
	attention_resolution: int = 16
	mock_latent_shape: tuple = (4, 16, 16)
	mock_noise_scale: float = 1.0
	mock_kernel_size: int = 3

	def build(self, seed=0):
		"""Construct the backend.

		Returns
		-------
		.DiffusionBackend
		"""
		if self.name == 'mock':
			return get_backend(
				'mock', seed=seed, latent_shape=tuple(self.mock_latent_shape),
				noise_scale=self.mock_noise_scale, kernel_size=self.mock_kernel_size,
			)
		return get_backend(
			self.name, model_id=self.model_id, device=self.device,
			attention_resolution=self.attention_resolution, seed=seed,
		)


def _convert(mapping, key, type_):
	value = mapping[key]
	if value is None:
		return None
	try:
		if type_ is bool and isinstance(value, str):
			if value.lower() not in ('true', 'false', '1', '0', 'yes', 'no'):
				raise ValueError(value)
			return value.lower() in ('true', '1', 'yes')
		return type_(value)
	except (TypeError, ValueError):
		raise ConfigError('Invalid value for %s: %r' % (key, value)) from None


def _dift_layer(value):
	if value is None:
		return None
	if isinstance(value, str) and value.isdigit():
		return int(value)
	return value


@dataclass
class RunConfig:
	"""Complete configuration of a transfer run.

	Build from flat key-value settings with :meth:`from_mapping`.
	"""
	source: Optional[Path] = None
	target: Optional[Path] = None
	source_prompt: str = ''
	target_prompt: str = ''
	object_word: str = ''
	params: TransferParams = field(default_factory=TransferParams)
	schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
	backend: BackendConfig = field(default_factory=BackendConfig)
	null_text: NullTextConfig = field(default_factory=NullTextConfig)
	guidance_scale: float = 7.5
	fixed_point_iterations: int = 10
	dift_timestep: int = DEFAULT_DIFT_TIMESTEP
	dift_layer: object = None
	mask_path: Optional[Path] = None
	cache_dir: Path = field(default_factory=default_cache_dir)
	use_cache: bool = True
	out_dir: Path = Path('out')
	seed: int = 0
	dump_diagnostics: bool = False
	export_mask: bool = False

	@classmethod
	def from_mapping(cls, mapping):
		"""Build from flat settings, falling back to :data:`.DEFAULT_CONFIG`.

		Keys with value None are treated as unset.

		Parameters
		----------
		mapping : collections.abc.Mapping

		Returns
		-------
		.RunConfig

		Raises
		------
		.ConfigError
		"""
		unknown = sorted(set(mapping) - set(DEFAULT_CONFIG))
		if unknown:
			raise ConfigError('Unknown configuration keys: %s' % ', '.join(unknown))

		c = ChainMap({k: v for k, v in mapping.items() if v is not None}, DEFAULT_CONFIG)

		def path(key):
			value = c[key]
			return None if value is None else Path(value).expanduser()

		shape = c['mock_latent_shape']
		if not isinstance(shape, (list, tuple)) or len(shape) != 3:
			raise ConfigError('mock_latent_shape must be a list of three integers, got %r' % (shape,))

		match_threshold = _convert(c, 'match_threshold', float)
		params = TransferParams(
			delta=_convert(c, 'delta', float),
			lambda_=_convert(c, 'lambda', float),
			gamma=_convert(c, 'gamma', float),
			start_step=_convert(c, 'start_step', int),
			end_step=_convert(c, 'end_step', int),
			matching_mode=c['matching'],
			mask_threshold=_convert(c, 'mask_threshold', float),
			match_threshold=match_threshold,
			semantic_matching=_convert(c, 'semantic_matching', bool),
			latent_deviation=_convert(c, 'latent_deviation', bool),
		)
		null_text = NullTextConfig(
			iterations_per_step=_convert(c, 'null_text_iterations', int),
			learning_rate=_convert(c, 'null_text_learning_rate', float),
			early_stop_epsilon=_convert(c, 'null_text_epsilon', float),
		)
		backend = BackendConfig(
			name=c['backend'],
			model_id=c['model_id'],
			device=c['device'],
			attention_resolution=_convert(c, 'attention_resolution', int),
			mock_latent_shape=tuple(int(n) for n in shape),
			mock_noise_scale=_convert(c, 'mock_noise_scale', float),
			mock_kernel_size=_convert(c, 'mock_kernel_size', int),
		)
		if backend.name not in ('mock', 'diffusion'):
			raise ConfigError('Unknown backend %r' % backend.name)

		return cls(
			source=path('source'),
			target=path('target'),
			source_prompt=c['source_prompt'],
			target_prompt=c['target_prompt'],
			object_word=c['object_word'],
			params=params,
			schedule=ScheduleConfig(num_sample_steps=_convert(c, 'num_sample_steps', int)),
			backend=backend,
			null_text=null_text,
			guidance_scale=_convert(c, 'guidance_scale', float),
			fixed_point_iterations=_convert(c, 'fixed_point_iterations', int),
			dift_timestep=_convert(c, 'dift_timestep', int),
			dift_layer=_dift_layer(c['dift_layer']),
			mask_path=path('mask_path'),
			cache_dir=path('cache_dir') or default_cache_dir(),
			use_cache=_convert(c, 'use_cache', bool),
			out_dir=path('out_dir'),
			seed=_convert(c, 'seed', int),
			dump_diagnostics=_convert(c, 'dump_diagnostics', bool),
			export_mask=_convert(c, 'export_mask', bool),
		)

	def to_dict(self):
		"""Flat snapshot using the keys of :data:`.DEFAULT_CONFIG`."""
		p = self.params
		return to_jsonable({
			'source': self.source,
			'target': self.target,
			'source_prompt': self.source_prompt,
			'target_prompt': self.target_prompt,
			'object_word': self.object_word,
			'delta': p.delta,
			'lambda': p.lambda_,
			'gamma': p.gamma,
			'start_step': p.start_step,
			'end_step': p.end_step,
			'matching': p.matching_mode,
			'mask_threshold': p.mask_threshold,
			'match_threshold': p.match_threshold,
			'semantic_matching': p.semantic_matching,
			'latent_deviation': p.latent_deviation,
			'mask_path': self.mask_path,
			'backend': self.backend.name,
			'model_id': self.backend.model_id,
			'device': self.backend.device,
			'guidance_scale': self.guidance_scale,
			'dift_layer': self.dift_layer,
			'dift_timestep': self.dift_timestep,
			'attention_resolution': self.backend.attention_resolution,
			'num_sample_steps': self.schedule.num_sample_steps,
			'null_text_iterations': self.null_text.iterations_per_step,
			'null_text_learning_rate': self.null_text.learning_rate,
			'null_text_epsilon': self.null_text.early_stop_epsilon,
			'fixed_point_iterations': self.fixed_point_iterations,
			'mock_latent_shape': self.backend.mock_latent_shape,
			'mock_noise_scale': self.backend.mock_noise_scale,
			'mock_kernel_size': self.backend.mock_kernel_size,
			'cache_dir': self.cache_dir,
			'use_cache': self.use_cache,
			'out_dir': self.out_dir,
			'seed': self.seed,
			'dump_diagnostics': self.dump_diagnostics,
			'export_mask': self.export_mask,
		})

	def validate(self, target=True, object_word=True):
		"""Check the settings a run needs.

		Parameters
		----------
		target : bool
			Whether the target image and prompt are needed.
		object_word : bool
			Whether the object word is needed.

		Raises
		------
		.ConfigError
		"""
		self.params.check_steps(self.schedule.num_sample_steps)

		needed = [('source', self.source, self.source_prompt)]
		if target:
			needed.append(('target', self.target, self.target_prompt))

		for name, path, prompt in needed:
			if path is None:
				raise ConfigError('No %s image given' % name)
			if not Path(path).is_file():
				raise ConfigError('%s image not found: %s' % (name.capitalize(), path))
			if not prompt:
				raise ConfigError('The %s prompt must not be empty' % name)

		if self.mask_path is not None and not Path(self.mask_path).is_file():
			raise ConfigError('Mask image not found: %s' % self.mask_path)

		if object_word and self.mask_path is None:
			if not self.object_word:
				raise ConfigError('No object word given')
			words = re.findall(r'[\w\'-]+', self.source_prompt.lower())
			if not set(re.findall(r'[\w\'-]+', self.object_word.lower())) <= set(words):
				raise ConfigError('Object word %r does not occur in the source prompt %r' % (
					self.object_word, self.source_prompt))


@dataclass
class RunResult:
	"""Outcome of one transfer run.

	Attributes
	----------
	image : numpy.ndarray
		Output RGB image.
	latent : torch.Tensor
		Final clean latent.
	mask : .ObjectMask
	manifest : dict
		Deterministic record of the run, including every deviated step.
	timings : dict
		Wall-clock seconds per stage and cache hits.
	config : dict
		Flat configuration snapshot.
	out_dir : pathlib.Path
		Directory outputs were written to, if any.
	"""
	image: np.ndarray
	latent: torch.Tensor
	mask: ObjectMask
	manifest: dict
	timings: dict
	config: dict
	out_dir: Optional[Path] = None


def load_image(path, size):
	"""Load an RGB image, center-cropped to a square and resized.

	Returns
	-------
	numpy.ndarray
		``uint8`` array of shape ``(size, size, 3)``.
	"""
	with Image.open(path) as img:
		img = ImageOps.fit(img.convert('RGB'), (size, size), Image.BICUBIC)
		return np.asarray(img, dtype=np.uint8).copy()


def save_image(path, image):
	Image.fromarray(np.asarray(image, dtype=np.uint8), mode='RGB').save(path, format='PNG')


class TransferPipeline:
	"""Runs the stages of a transfer, holding inversions for reuse.

	Attributes
	----------
	cfg : .RunConfig
	backend : .DiffusionBackend
	schedule : .Schedule
	cache : .TrajectoryCache or None
	timings : dict
		Seconds spent per stage.
	cache_hits : dict
		Whether each inversion was loaded from the cache.
	masks : dict
		Attention masks by start step and threshold.
	"""

	def __init__(self, cfg, backend=None, progress=True):
		self.cfg = cfg
		self.schedule = cfg.schedule.build()
		self.backend = cfg.backend.build(cfg.seed) if backend is None else backend
		self.cache = TrajectoryCache(cfg.cache_dir) if cfg.use_cache else None
		self.progress = progress
		self.timings = {}
		self.cache_hits = {}
		self.images = {}
		self.trajectories = {}
		self.masks = {}

	@contextmanager
	def stage(self, name):
		"""Time a stage and wrap failures in :class:`.StageError`."""
		logger.info('Stage %s', name)
		start = time.perf_counter()
		try:
			yield
		except StageError:
			raise
		except Exception as exc:
			raise StageError(name, exc) from exc
		finally:
			self.timings[name] = self.timings.get(name, 0.) + time.perf_counter() - start

	def _prompt(self, kind):
		return self.cfg.source_prompt if kind == 'source' else self.cfg.target_prompt

	def _inversion_settings(self, kind):
		settings = {
			'backend': self.backend.fingerprint(),
			'fixed_point_iterations': self.cfg.fixed_point_iterations,
		}
		if kind == 'source':
			settings['guidance_scale'] = self.cfg.guidance_scale
			settings['null_text'] = asdict(self.cfg.null_text)
		return to_jsonable(settings)

	def load(self, kinds=('source', 'target')):
		with self.stage('load'):
			for kind in kinds:
				if kind not in self.images:
					path = self.cfg.source if kind == 'source' else self.cfg.target
					self.images[kind] = load_image(path, self.backend.image_size)

	def invert(self, kind):
		"""Get the trajectory of the source or target image, from the cache if possible.

		Returns
		-------
		.LatentTrajectory
		"""
		if kind in self.trajectories:
			return self.trajectories[kind]

		with self.stage('invert-' + kind):
			image = self.images[kind]
			prompt = self._prompt(kind)
			key = TrajectoryKey.create(kind, image, prompt, self.schedule, self._inversion_settings(kind))

			traj = None
			if self.cache is not None:
				traj = self.cache.get(key, dtype=self.backend.dtype)
			self.cache_hits[kind] = traj is not None

			if traj is None:
				if kind == 'source':
					traj = null_text_invert(
						image, prompt, self.schedule, self.backend, self.cfg.null_text, self.cfg.guidance_scale,
						self.cfg.fixed_point_iterations, progress=self.progress,
					)
				else:
					traj = ddim_invert(
						image, prompt, self.schedule, self.backend, self.cfg.fixed_point_iterations,
						progress=self.progress,
					)
				if self.cache is not None:
					self.cache.put(key, traj)
			else:
				logger.info('Loaded %s trajectory from cache', kind)

			traj.validate(self.schedule)

		self.trajectories[kind] = traj
		return traj

	def prepare(self, target=True):
		"""Load images and invert them."""
		kinds = ('source', 'target') if target else ('source',)
		torch.manual_seed(self.cfg.seed)
		self.load(kinds)
		for kind in kinds:
			self.invert(kind)

	def compute_mask(self, source, params):
		"""Object mask from attention of the source path at the first deviated step.

		The mask only depends on the start step and threshold, and is reused by
		every run of this pipeline with the same values.

		Returns
		-------
		.ObjectMask
		"""
		b = self.backend
		if self.cfg.mask_path is not None:
			return ObjectMask.from_image(self.cfg.mask_path, b.latent_grid, params.mask_threshold)

		key = (params.start_step, params.mask_threshold)
		if key in self.masks:
			return self.masks[key]

		indices = b.token_indices(self.cfg.source_prompt, self.cfg.object_word)
		if not indices:
			raise ContractError('Object word %r is not among the tokens of %r' % (
				self.cfg.object_word, self.cfg.source_prompt))

		cond = b.embed_text(self.cfg.source_prompt)
		entry = source[params.start_step]
		with torch.no_grad():
			capture = b.capture_cross_attention(entry.latent, entry.timestep, cond, indices)
		mask = extract_object_mask([capture], indices, params.mask_threshold)

		self.masks[key] = mask
		return mask

	def denoise(self, source, target, mask, params, diag_dir=None):
		"""Denoise the source path, deviating inside the window.

		Returns
		-------
		tuple
			``(latent, records)``: the final clean latent and one dict per
			deviated step.
		"""
		s, b = self.schedule, self.backend
		matcher = SemanticMatcher(b, params.matching_mode, self.cfg.dift_timestep, self.cfg.dift_layer,
		                          params.match_threshold)
		if params.semantic_matching:
			matcher.prepare(source.clean_latent, target.clean_latent)

		x = source.top
		records = []

		with torch.no_grad():
			for i, t in enumerate(tqdm(s.timesteps, desc='Denoising', disable=not self.progress, leave=False)):
				cond = source.conditioning(b, i)
				eps = cond.predict(b, x, t)
				t_prev = s.prev_timestep(t)

				if not params.in_window(i):
					x = ddim_step(x, eps, t, t_prev, s)
					continue

				x0_src = predict_x0(x, eps, t, s)
				x0_tar = target[i].predicted_x0
				if params.semantic_matching:
					c = matcher.match_step(x0_src, x0_tar, t)
				else:
					c = CorrelationMap.identity(mask.grid)
				aligned = apply_correlation(c, x0_tar)
				region = mask.data & c.valid
				x0_prime = transfer_x0(x0_src, aligned, region, params.delta)
				tdelta = transfer_delta(x0_prime, x0_src)

				if params.latent_deviation:
					step = deviation_step(x, x0_src, tdelta, t, t_prev, params, s, b, cond, eps_xt=eps)
				else:
					step = direct_step(x, x0_src, tdelta, t, t_prev, params, s, eps)
				x = step.x_prev_star

				records.append({
					'index': i,
					'timestep': t,
					'timestep_prev': t_prev,
					'delta': params.delta,
					'lambda': step.lambda_,
					'gamma': step.gamma,
					'mask_count': int(region.sum()),
					'identity_match': c.is_identity(),
					'match_score_mean': c.score.mean().item() if params.semantic_matching else None,
					'transfer_abs_max': tdelta.abs().max().item(),
				})

				if diag_dir is not None:
					self._dump_step(diag_dir, i, step, c, x0_prime, tdelta)

		return x, records

	def _dump_step(self, diag_dir, i, step, c, x0_prime, tdelta):
		diag_dir.mkdir(parents=True, exist_ok=True)
		prefix = 'step_%02d_' % i
		for name, tensor in step.arrays().items():
			write_array(diag_dir / (prefix + name + '.x0ta'), tensor, name, step.t)
		write_array(diag_dir / (prefix + 'x0_prime.x0ta'), x0_prime, 'x0_prime', step.t)
		write_array(diag_dir / (prefix + 'transfer.x0ta'), tdelta, 'transfer', step.t)
		write_array(diag_dir / (prefix + 'mapping.x0ta'), c.mapping.float(), 'mapping', step.t)
		save_image(diag_dir / (prefix + 'x0.png'), self.backend.decode_latent(x0_prime))

	def _manifest(self, config, source, mask, records):
		return to_jsonable({
			'version': __version__,
			'config': config,
			'backend': self.backend.fingerprint(),
			'schedule': {
				'fingerprint': self.schedule.fingerprint(),
				'timesteps': list(self.schedule.timesteps),
			},
			'mask': {
				'count': mask.count,
				'grid': list(mask.grid),
				'token_indices': mask.token_indices,
				'threshold': mask.threshold,
			},
			'source_residuals': source.residuals,
			'steps': records,
		})

	def _write(self, out_dir, image, mask, manifest, timings):
		out_dir.mkdir(parents=True, exist_ok=True)
		save_image(out_dir / 'output.png', image)
		if self.cfg.export_mask:
			mask.save_png(out_dir / 'mask.png')
		write_json(out_dir / 'manifest.json', manifest)
		write_json(out_dir / 'timings.json', timings)

	def run(self, params=None, out_dir=None):
		"""Run the transfer, inverting first if not done yet.

		Parameters
		----------
		params : .TransferParams
			Defaults to the configured parameters.
		out_dir : pathlib.Path
			Where to write outputs. Nothing is written if None.

		Returns
		-------
		.RunResult
		"""
		params = self.cfg.params if params is None else params
		params.check_steps(self.schedule.num_sample_steps)
		self.prepare()
		source, target = self.trajectories['source'], self.trajectories['target']

		with self.stage('mask'):
			mask = self.compute_mask(source, params)

		with self.stage('denoise'):
			diag_dir = Path(out_dir) / 'diagnostics' if out_dir is not None and self.cfg.dump_diagnostics else None
			latent, records = self.denoise(source, target, mask, params, diag_dir)

		with self.stage('decode'):
			image = self.backend.decode_latent(latent)

		config = dict(self.cfg.to_dict(), **{'end_step': params.end_step, 'start_step': params.start_step})
		manifest = self._manifest(config, source, mask, records)
		timings = {
			'seconds': dict(self.timings),
			'cache_hits': dict(self.cache_hits),
		}

		if out_dir is not None:
			with self.stage('write'):
				self._write(Path(out_dir), image, mask, manifest, timings)

		return RunResult(image, latent, mask, manifest, timings, config, None if out_dir is None else Path(out_dir))

	def reconstruct(self):
		"""Decode the replay of the source trajectory.

		Returns
		-------
		numpy.ndarray
		"""
		self.prepare(target=False)
		with self.stage('denoise'):
			latent = replay_reconstruction(self.trajectories['source'], self.schedule, self.backend, self.progress)
		with self.stage('decode'):
			return self.backend.decode_latent(latent)

	def match_debug(self, step, out_dir):
		"""Write the similarity field and mapping of one step's predicted x0 pair.

		The source x0 is taken from the source trajectory, so this shows the
		matching before any deviation.

		Returns
		-------
		list of pathlib.Path
			Files written.
		"""
		if not 0 <= step < self.schedule.num_sample_steps:
			raise ConfigError('Step %d outside of the %d sampling steps' % (step, self.schedule.num_sample_steps))
		self.prepare()
		params = self.cfg.params
		matcher = SemanticMatcher(self.backend, 'progressive', self.cfg.dift_timestep, self.cfg.dift_layer,
		                          params.match_threshold)
		src, tar = self.trajectories['source'][step], self.trajectories['target'][step]

		with torch.no_grad():
			sim = matcher.similarity(src.predicted_x0, tar.predicted_x0)
			c = matcher.match_step(src.predicted_x0, tar.predicted_x0, src.timestep)

		out_dir = Path(out_dir)
		out_dir.mkdir(parents=True, exist_ok=True)
		files = [
			(out_dir / ('similarity_%02d.x0ta' % step), sim, 'similarity'),
			(out_dir / ('mapping_%02d.x0ta' % step), c.mapping.float(), 'mapping'),
			(out_dir / ('score_%02d.x0ta' % step), c.score, 'score'),
		]
		for path, tensor, role in files:
			write_array(path, tensor, role, src.timestep)
		return [path for path, _, _ in files]


def run_transfer(cfg, backend=None, progress=True):
	"""Run a full transfer and write its outputs to ``cfg.out_dir``.

	Parameters
	----------
	cfg : .RunConfig
	backend : .DiffusionBackend
		Use this backend instead of constructing one from ``cfg``.
	progress : bool

	Returns
	-------
	.RunResult

	Raises
	------
	.ConfigError
		If the configuration is invalid.
	.StageError
		If any stage fails.
	"""
	cfg.validate()
	pipeline = TransferPipeline(cfg, backend, progress)
	return pipeline.run(out_dir=cfg.out_dir)


def reconstruct(cfg, backend=None, progress=True):
	"""Reconstruct the source image by replaying its null-text inversion.

	Returns
	-------
	numpy.ndarray
	"""
	cfg.validate(target=False, object_word=False)
	return TransferPipeline(cfg, backend, progress).reconstruct()


def sweep_end_steps(cfg, end_steps, backend=None, progress=True):
	"""Run the transfer once per end step, reusing the inversions.

	Outputs of each run go to ``cfg.out_dir / 'end_step_NN'``.

	Returns
	-------
	list of .RunResult
	"""
	cfg.validate()
	pipeline = TransferPipeline(cfg, backend, progress)
	results = []
	for end_step in end_steps:
		try:
			params = replace(cfg.params, end_step=end_step)
			params.check_steps(pipeline.schedule.num_sample_steps)
		except X0TransferError as exc:
			raise ConfigError('Invalid end step %r: %s' % (end_step, exc)) from None
		out_dir = Path(cfg.out_dir) / ('end_step_%02d' % end_step)
		logger.info('Sweep: end step %d', end_step)
		results.append(pipeline.run(params, out_dir))
	return results
