"""Shared fixtures."""

import numpy as np
import pytest
import torch
from PIL import Image

from x0transfer.schedule import Schedule
from x0transfer.backend import MockBackend


def _has_gpu_backend():
	try:
		import diffusers  # noqa: F401
	except ImportError:
		return False
	return torch.cuda.is_available()


def pytest_collection_modifyitems(config, items):
	if _has_gpu_backend():
		return
	skip = pytest.mark.skip(reason='diffusers or CUDA not available')
	for item in items:
		if 'gpu' in item.keywords:
			item.add_marker(skip)


def make_image(n, seed=0):
	"""Smooth random RGB image with a bright disk, as uint8 array."""
	rng = np.random.RandomState(seed)
	yy, xx = np.mgrid[0:n, 0:n] / max(n - 1, 1)
	image = np.empty((n, n, 3))
	for c in range(3):
		a, b, d = rng.uniform(-1, 1, size=3)
		image[..., c] = 0.5 + 0.25 * (a * xx + b * yy) + 0.1 * d
	cy, cx = rng.uniform(0.3, 0.7, size=2)
	disk = (yy - cy) ** 2 + (xx - cx) ** 2 < 0.05
	image[disk] = rng.uniform(0.1, 0.9, size=3)
	return (np.clip(image, 0, 1) * 255).round().astype(np.uint8)


@pytest.fixture()
def schedule():
	return Schedule.ddim(num_sample_steps=10)


@pytest.fixture()
def schedule50():
	return Schedule.ddim(num_sample_steps=50)


@pytest.fixture()
def backend():
	"""Float32 mock backend on a 16x16 grid."""
	return MockBackend(seed=0)


@pytest.fixture()
def backend64():
	"""Float64 mock backend on an 8x8 grid, for tight tolerances."""
	return MockBackend(seed=1, latent_shape=(4, 8, 8), dtype=torch.float64)


@pytest.fixture()
def source_image():
	return make_image(16, seed=1)


@pytest.fixture()
def target_image():
	return make_image(16, seed=2)


@pytest.fixture()
def image_files(tmp_path, source_image, target_image):
	"""Source and target images written to PNG files."""
	paths = {}
	for name, image in [('source', source_image), ('target', target_image)]:
		path = tmp_path / (name + '.png')
		Image.fromarray(image).save(path)
		paths[name] = path
	return paths


@pytest.fixture()
def run_mapping(tmp_path, image_files):
	"""Flat settings of a small mock transfer run."""
	return {
		'source': str(image_files['source']),
		'target': str(image_files['target']),
		'source_prompt': 'a photo of a cat',
		'target_prompt': 'a photo of a dog',
		'object_word': 'cat',
		'num_sample_steps': 25,
		'start_step': 6,
		'end_step': 12,
		'mask_threshold': 0.3,
		'cache_dir': str(tmp_path / 'cache'),
		'out_dir': str(tmp_path / 'out'),
		'seed': 0,
	}
