"""Test x0transfer.backend"""

import numpy as np
import pytest
import torch

from x0transfer.backend import MockBackend, TextEmbedding, AttentionCapture, Conditioning, get_backend
from x0transfer.backend.base import resample_to_grid, FeatureMap
from x0transfer.errors import ShapeError, ConfigError, UnknownTimestepError

from conftest import make_image


class TextSensitiveBackend(MockBackend):
	"""Mock whose noise prediction depends on the text embedding."""

	def predict_noise_single(self, x, t, embedding):
		return super().predict_noise_single(x, t, embedding) + embedding.data.mean()


def test_noise_prediction(backend):
	gen = torch.Generator().manual_seed(0)
	x = torch.randn(backend.latent_shape, generator=gen)
	y = torch.randn(backend.latent_shape, generator=gen)
	emb = backend.embed_text('a cat')

	eps = backend.predict_noise_single(x, 500, emb)
	assert eps.shape == x.shape
	assert eps.dtype == x.dtype
	assert torch.equal(eps, backend.predict_noise_single(x, 500, emb))
	assert torch.equal(eps, MockBackend(seed=0).predict_noise_single(x, 500, emb))
	assert not torch.equal(eps, backend.predict_noise_single(y, 500, emb))
	assert not torch.equal(eps, MockBackend(seed=5).predict_noise_single(x, 500, emb))

	# Text is ignored
	assert torch.equal(eps, backend.predict_noise_single(x, 500, backend.embed_text('')))

	with pytest.raises(ShapeError):
		backend.predict_noise_single(torch.zeros(4, 8, 8), 500, emb)
	with pytest.raises(UnknownTimestepError):
		backend.predict_noise_single(x, 1000, emb)


def test_zero_noise():
	b = MockBackend(noise_scale=0.)
	x = torch.randn(b.latent_shape)
	assert torch.equal(b.predict_noise_single(x, 10, b.embed_text('x')), torch.zeros_like(x))


def test_guidance():
	b = TextSensitiveBackend(seed=0)
	x = torch.randn(b.latent_shape, generator=torch.Generator().manual_seed(1))
	cond, uncond = b.embed_text('a dog'), b.embed_text('')
	eps_c = b.predict_noise_single(x, 300, cond)
	eps_u = b.predict_noise_single(x, 300, uncond)

	for g in [0., 1., 7.5]:
		expected = eps_u + g * (eps_c - eps_u)
		assert torch.allclose(b.predict_noise(x, 300, cond, uncond, g), expected)
		assert torch.allclose(Conditioning(cond, uncond, g).predict(b, x, 300), expected)

	assert torch.equal(Conditioning(cond).predict(b, x, 300), eps_c)


def test_codec(backend):
	image = make_image(16, seed=3)
	latent = backend.encode_image(image)
	assert latent.shape == backend.latent_shape
	assert latent.dtype == torch.float32
	assert latent.min() >= 0 and latent.max() <= 1
	assert np.array_equal(backend.decode_latent(latent), image)

	assert torch.equal(backend.encode_image(np.zeros((16, 16, 3), dtype=np.uint8)), torch.zeros(backend.latent_shape))

	with pytest.raises(ShapeError):
		backend.encode_image(np.zeros((8, 8, 3), dtype=np.uint8))


def test_text(backend):
	emb = backend.embed_text('a photo of a cat')
	assert emb.kind == 'conditional'
	assert emb.data.shape == (backend.token_count, backend.embed_dim)
	assert torch.equal(emb.data, backend.embed_text('a photo of a cat').data)
	assert not torch.equal(emb.data, backend.embed_text('a photo of a dog').data)
	assert backend.embed_text('').is_unconditional

	assert backend.token_indices('a photo of a cat', 'cat') == [5]
	assert backend.token_indices('a photo of a cat', 'Cat') == [5]
	assert backend.token_indices('a photo of a cat', 'photo of') == [2, 3]
	assert backend.token_indices('a photo of a cat', 'dog') == []
	assert backend.token_indices('a photo of a cat', '') == []


def test_dift_features(backend):
	x0 = backend.encode_image(make_image(16, seed=4))
	f = backend.extract_dift_features(x0, 261)
	assert isinstance(f, FeatureMap)
	assert f.data.shape == (32, 16, 16)
	assert f.grid == (16, 16)
	assert f.source_timestep == 261
	assert f.source_layer == 'patch'
	assert torch.equal(f.data, backend.extract_dift_features(x0, 261).data)

	assert backend.extract_dift_features(x0, 261, 'point').data.shape == (32, 16, 16)

	with pytest.raises(ConfigError):
		backend.extract_dift_features(x0, 261, 'up_blocks.1')


def test_cross_attention(backend):
	probs = backend.attention_probs()
	assert probs.shape == (backend.token_count, 16, 16)
	assert torch.allclose(probs.sum(dim=0), torch.ones(16, 16, dtype=torch.float64))

	x = torch.zeros(backend.latent_shape)
	cap = backend.capture_cross_attention(x, 500, backend.embed_text('a cat'), [2, 3])
	assert isinstance(cap, AttentionCapture)
	assert cap.token_indices == [2, 3]
	assert cap.grid == (16, 16)
	assert cap.maps['mock'].shape == (1, 2, 16, 16)
	assert torch.allclose(cap.mean_map(), probs[[2, 3]].mean(dim=0).float())

	with pytest.raises(IndexError):
		backend.capture_cross_attention(x, 500, backend.embed_text('a cat'), [backend.token_count])


def test_attention_centers():
	b = MockBackend(token_count=2, attention_centers={1: (8, 8)})
	probs = b.attention_probs()[1]
	assert divmod(int(probs.argmax()), 16) == (8, 8)


def test_types():
	with pytest.raises(ShapeError):
		TextEmbedding(torch.zeros(2, 3, 4))
	with pytest.raises(ValueError):
		TextEmbedding(torch.zeros(2, 3), kind='other')
	with pytest.raises(ShapeError):
		FeatureMap(torch.zeros(3, 4), 10, 'x')


def test_resample_to_grid():
	maps = torch.rand(2, 3, 4, 4)
	assert resample_to_grid(maps, (4, 4)) is maps
	assert resample_to_grid(maps, (8, 8)).shape == (2, 3, 8, 8)
	up = resample_to_grid(maps, (8, 8), mode='nearest')
	assert torch.equal(up[..., ::2, ::2], maps)


def test_get_backend():
	b = get_backend('mock', seed=3)
	assert isinstance(b, MockBackend)
	assert b.fingerprint()['backend'] == 'MockBackend'
	assert b.fingerprint() == get_backend('mock', seed=3).fingerprint()
	assert b.fingerprint() != get_backend('mock', seed=4).fingerprint()

	with pytest.raises(ConfigError):
		get_backend('other')
	with pytest.raises(ConfigError):
		MockBackend(latent_shape=(4, 8, 16))


@pytest.mark.gpu
def test_diffusers_backend():
	b = get_backend('diffusion')
	image = np.full((b.image_size, b.image_size, 3), 128, dtype=np.uint8)
	x0 = b.encode_image(image)
	assert x0.shape == b.latent_shape

	cond = b.embed_text('a photo of a cat')
	eps = b.predict_noise(x0, 501, cond, b.embed_text(''), 7.5)
	assert eps.shape == x0.shape

	indices = b.token_indices('a photo of a cat', 'cat')
	assert indices == [5]
	cap = b.capture_cross_attention(x0, 501, cond, indices)
	assert cap.grid == b.latent_grid

	f = b.extract_dift_features(x0, 261)
	assert b.latent_grid[0] % f.grid[0] == 0
