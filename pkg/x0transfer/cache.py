"""Content-addressed on-disk cache of inverted trajectories."""

import os
import json
import shutil
import hashlib
import logging
import tempfile
from pathlib import Path
from collections.abc import MutableMapping
from dataclasses import dataclass

import numpy as np
import torch

from .backend import TextEmbedding
from .inversion import LatentTrajectory, TrajectoryEntry
from .io import write_array, read_array, write_json, read_json


logger = logging.getLogger(__name__)


#: Number of hex digits kept from each hash.
HASH_LENGTH = 16

_ENTRY_VERSION = 1


def _digest(data):
	return hashlib.sha256(data).hexdigest()[:HASH_LENGTH]


def hash_image(image):
	"""Hash of an RGB array's shape and bytes."""
	image = np.ascontiguousarray(image)
	return _digest(repr((image.shape, str(image.dtype))).encode() + image.tobytes())


def hash_text(text):
	return _digest(text.encode('utf8'))


def hash_config(config):
	"""Hash of a JSON-serializable mapping, independent of key order."""
	return _digest(json.dumps(config, sort_keys=True).encode('utf8'))


def default_cache_dir():
	"""``$X0T_CACHE_DIR`` if set, else ``~/.cache/x0transfer``."""
	env = os.environ.get('X0T_CACHE_DIR')
	return Path(env).expanduser() if env else Path('~/.cache/x0transfer').expanduser()


@dataclass(frozen=True)
class TrajectoryKey:
	"""Identifies a cached trajectory by the hashes of everything it depends on."""
	kind: str
	image_hash: str
	prompt_hash: str
	schedule_hash: str
	config_hash: str

	@classmethod
	def create(cls, kind, image, prompt, schedule, config):
		"""Key for inverting ``image`` under ``prompt``.

		Parameters
		----------
		kind : str
			``'source'`` or ``'target'``.
		image : numpy.ndarray
		prompt : str
		schedule : .Schedule
		config : dict
			Backend fingerprint and inversion settings.

		Returns
		-------
		.TrajectoryKey
		"""
		return cls(kind, hash_image(image), hash_text(prompt), schedule.fingerprint()[:HASH_LENGTH],
		           hash_config(config))

	@property
	def dirname(self):
		return '-'.join([self.kind, self.image_hash, self.prompt_hash, self.schedule_hash, self.config_hash])

	@classmethod
	def from_dirname(cls, name):
		parts = name.split('-')
		if len(parts) != 5:
			raise ValueError('Not a cache entry name: %r' % name)
		return cls(*parts)


class TrajectoryCache(MutableMapping):
	"""Stores trajectories in a directory, one subdirectory per key.

	Entries are written to a temporary directory and renamed into place, so
	readers never see partial entries. Arrays are stored as float32.

	Attributes
	----------
	cache_dir : pathlib.Path
	"""

	def __init__(self, cache_dir=None):
		self.cache_dir = (default_cache_dir() if cache_dir is None else Path(cache_dir).expanduser()).absolute()

	def __repr__(self):
		return '%s(%r)' % (type(self).__name__, str(self.cache_dir))

	def _locate(self, key):
		return self.cache_dir / key.dirname

	def _write_entry(self, path, traj):
		meta = {
			'version': _ENTRY_VERSION,
			'kind': traj.kind,
			'prompt': traj.prompt,
			'guidance_scale': traj.guidance_scale,
			'timesteps': traj.timesteps,
			'residuals': traj.residuals,
			'losses': traj.losses,
		}
		write_array(path / 'clean.x0ta', traj.clean_latent, 'clean_latent')
		for i, e in enumerate(traj.entries):
			prefix = 'step_%03d_' % i
			write_array(path / (prefix + 'latent.x0ta'), e.latent, 'latent', e.timestep)
			write_array(path / (prefix + 'noise.x0ta'), e.noise, 'noise', e.timestep)
			write_array(path / (prefix + 'x0.x0ta'), e.predicted_x0, 'predicted_x0', e.timestep)
			if e.uncond_embedding is not None:
				write_array(path / (prefix + 'uncond.x0ta'), e.uncond_embedding.data, 'uncond_embedding', e.timestep)
		write_json(path / 'metadata.json', meta)

	def _read_entry(self, path, dtype=torch.float32):
		meta = read_json(path / 'metadata.json')
		if meta.get('version') != _ENTRY_VERSION:
			raise ValueError('Unsupported cache entry version %r' % meta.get('version'))

		def load(name, role, t=None):
			tensor, header = read_array(path / name)
			if header['role'] != role or header['timestep'] != t:
				raise ValueError('Unexpected array in %s' % name)
			return tensor.to(dtype)

		entries = []
		for i, t in enumerate(meta['timesteps']):
			prefix = 'step_%03d_' % i
			uncond = None
			if meta['kind'] == 'source':
				uncond = TextEmbedding(load(prefix + 'uncond.x0ta', 'uncond_embedding', t), 'unconditional')
			entries.append(TrajectoryEntry(
				t,
				load(prefix + 'latent.x0ta', 'latent', t),
				load(prefix + 'noise.x0ta', 'noise', t),
				load(prefix + 'x0.x0ta', 'predicted_x0', t),
				uncond,
			))

		return LatentTrajectory(
			meta['kind'], meta['prompt'], meta['guidance_scale'], load('clean.x0ta', 'clean_latent'),
			entries, residuals=meta['residuals'], losses=meta['losses'],
		)

	def get(self, key, default=None, dtype=torch.float32):
		"""Get a cached trajectory, or ``default`` on a miss.

		Corrupt entries are logged and count as misses.

		Returns
		-------
		.LatentTrajectory
		"""
		path = self._locate(key)
		if not path.is_dir():
			return default
		try:
			return self._read_entry(path, dtype)
		except (OSError, ValueError, KeyError, TypeError) as exc:
			logger.warning('Ignoring unreadable cache entry %s: %s', path, exc)
			return default

	def put(self, key, traj):
		"""Store a trajectory. I/O failures are logged, not raised.

		Returns
		-------
		bool
			Whether the entry was written.
		"""
		dest = self._locate(key)
		if dest.is_dir():
			return False

		tmp = None
		try:
			self.cache_dir.mkdir(parents=True, exist_ok=True)
			tmp = Path(tempfile.mkdtemp(prefix='.tmp-', dir=str(self.cache_dir)))
			self._write_entry(tmp, traj)
			os.replace(str(tmp), str(dest))
		except OSError as exc:
			if dest.is_dir():
				# Lost a race with another writer of the same key
				logger.debug('Cache entry %s written concurrently', dest)
			else:
				logger.warning('Could not write cache entry %s: %s', dest, exc)
			return False
		finally:
			if tmp is not None and tmp.exists():
				shutil.rmtree(str(tmp), ignore_errors=True)

		logger.debug('Cached %s trajectory in %s', traj.kind, dest)
		return True

	def clear(self):
		"""Remove every entry."""
		for key in list(self):
			del self[key]

	def __contains__(self, key):
		return isinstance(key, TrajectoryKey) and self._locate(key).is_dir()

	def __iter__(self):
		if not self.cache_dir.is_dir():
			return
		for path in sorted(self.cache_dir.iterdir()):
			if path.is_dir() and not path.name.startswith('.'):
				try:
					yield TrajectoryKey.from_dirname(path.name)
				except ValueError:
					continue

	def __len__(self):
		return sum(1 for key in self)

	def __getitem__(self, key):
		traj = self.get(key)
		if traj is None:
			raise KeyError(key)
		return traj

	def __setitem__(self, key, traj):
		self.put(key, traj)

	def __delitem__(self, key):
		path = self._locate(key)
		if not path.is_dir():
			raise KeyError(key)
		shutil.rmtree(str(path))
