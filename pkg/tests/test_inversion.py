"""Test x0transfer.inversion"""

import logging

import pytest
import torch

from x0transfer.backend import MockBackend
from x0transfer.errors import ContractError, ConfigError
from x0transfer.inversion import (
	NullTextConfig, LatentTrajectory, ddim_invert, null_text_invert, replay_reconstruction, replay_errors,
)
from x0transfer.schedule import predict_x0

from conftest import make_image


class GuidedMock(MockBackend):
	"""Mock whose prediction shifts with the mean of the text embedding, with gradients.

	Conditional embeddings are offset by one so guidance has a large effect.
	"""

	supports_embedding_grad = True

	def embed_text(self, prompt):
		emb = super().embed_text(prompt)
		if prompt:
			emb.data = emb.data + 1.
		return emb

	def predict_noise_single(self, x, t, embedding):
		return super().predict_noise_single(x, t, embedding) + embedding.data.mean()


@pytest.fixture()
def image8():
	return make_image(8, seed=5)


@pytest.fixture()
def smooth():
	"""Weakly nonlinear mock, on which fixed-point inversion converges quickly."""
	return MockBackend(seed=1, latent_shape=(4, 8, 8), noise_scale=0.25, dtype=torch.float64)


def test_config():
	cfg = NullTextConfig()
	assert (cfg.iterations_per_step, cfg.learning_rate, cfg.early_stop_epsilon) == (10, 1e-2, 1e-5)

	for kw in [dict(iterations_per_step=0), dict(learning_rate=-1.), dict(early_stop_epsilon=0.)]:
		with pytest.raises(ConfigError):
			NullTextConfig(**kw)


def test_ddim_invert_zero_noise(schedule, image8):
	b = MockBackend(latent_shape=(4, 8, 8), noise_scale=0., dtype=torch.float64)
	traj = ddim_invert(image8, 'a photo', schedule, b, progress=False)
	clean = b.encode_image(image8)

	for e in traj:
		a = schedule.alpha(e.timestep)
		assert torch.allclose(e.latent, a ** 0.5 * clean, rtol=0, atol=1e-12)
		assert torch.allclose(e.predicted_x0, clean, rtol=0, atol=1e-12)

	assert torch.allclose(replay_reconstruction(traj, schedule, b, progress=False), clean, rtol=0, atol=1e-12)


def test_ddim_invert(schedule, smooth, image8):
	traj = ddim_invert(image8, 'a photo of a cat', schedule, smooth, progress=False)

	assert traj.kind == 'target'
	assert len(traj) == schedule.num_sample_steps
	assert traj.timesteps == list(schedule.timesteps)
	assert traj.guidance_scale == 1.
	assert all(u is None for u in traj.uncond_embeddings)
	assert torch.equal(traj.clean_latent, smooth.encode_image(image8))
	traj.validate(schedule)

	for e in traj:
		assert torch.equal(predict_x0(e.latent, e.noise, e.timestep, schedule), e.predicted_x0)

	assert traj.entry_at(schedule.timesteps[3]) is traj[3]
	with pytest.raises(KeyError):
		traj.entry_at(-5)

	# Fixed-point inversion replays to within the iteration tolerance
	recon = replay_reconstruction(traj, schedule, smooth, progress=False)
	assert torch.allclose(recon, traj.clean_latent, rtol=0, atol=1e-5)
	assert max(replay_errors(traj, schedule, smooth)) < 1e-5


def test_ddim_invert_float32(schedule50, backend, source_image):
	traj = ddim_invert(source_image, 'a cat', schedule50, backend, progress=False)
	recon = replay_reconstruction(traj, schedule50, backend, progress=False)
	assert (recon - traj.clean_latent).abs().max() < 1e-3


def test_null_text_mock(schedule, smooth, image8):
	traj = null_text_invert(image8, 'a photo of a cat', schedule, smooth, progress=False)
	null = smooth.embed_text('')

	assert traj.kind == 'source'
	assert traj.guidance_scale == 7.5
	assert len(traj) == schedule.num_sample_steps
	traj.validate(schedule)

	# The prediction ignores text, so nothing is optimized
	for e in traj:
		assert torch.equal(e.uncond_embedding.data, null.data)
		assert e.uncond_embedding.is_unconditional
	assert all(loss < 1e-10 for loss in traj.losses)

	assert len(traj.residuals) == len(traj)
	assert all(r < 1e-5 for r in traj.residuals)
	assert replay_errors(traj, schedule, smooth) == pytest.approx(traj.residuals, abs=1e-12)

	recon = replay_reconstruction(traj, schedule, smooth, progress=False)
	assert torch.allclose(recon, traj.clean_latent, rtol=0, atol=1e-5)


def test_null_text_optimization(schedule, image8):
	prompt = 'a photo of a cat'
	b = GuidedMock(seed=2, latent_shape=(4, 8, 8), noise_scale=0.25, dtype=torch.float64)
	optimized = null_text_invert(image8, prompt, schedule, b, progress=False)

	b_fixed = GuidedMock(seed=2, latent_shape=(4, 8, 8), noise_scale=0.25, dtype=torch.float64)
	b_fixed.supports_embedding_grad = False
	fixed = null_text_invert(image8, prompt, schedule, b_fixed, progress=False)

	null = b.embed_text('').data
	assert not torch.equal(optimized[-1].uncond_embedding.data, null)
	assert torch.equal(fixed[-1].uncond_embedding.data, null)
	assert sum(optimized.residuals) < sum(fixed.residuals)

	# Stored embeddings reproduce the recorded residuals
	errors = replay_errors(optimized, schedule, b)
	assert errors == pytest.approx(optimized.residuals, abs=1e-9)


def test_non_convergence_warning(schedule, backend64, image8, caplog):
	cfg = NullTextConfig(early_stop_epsilon=1e-9)

	with caplog.at_level(logging.WARNING, logger='x0transfer.inversion'):
		traj = null_text_invert(image8, 'a cat', schedule, backend64, cfg, fixed_point_iterations=0, progress=False)

	assert 'did not reach' in caplog.text
	assert len(traj.residuals) == len(traj)
	assert max(traj.residuals) >= 1e-9


def test_missing_embeddings(schedule, backend64, image8):
	traj = null_text_invert(image8, 'a cat', schedule, backend64, progress=False)
	traj.entries[3].uncond_embedding = None

	with pytest.raises(ContractError):
		replay_reconstruction(traj, schedule, backend64, progress=False)
	with pytest.raises(ContractError):
		traj.validate(schedule)


def test_trajectory_checks(schedule, schedule50, backend64, image8):
	traj = ddim_invert(image8, 'a cat', schedule, backend64, progress=False)

	with pytest.raises(ContractError):
		traj.validate(schedule50)

	traj.entries[0].uncond_embedding = backend64.embed_text('')
	with pytest.raises(ContractError):
		traj.validate(schedule)

	with pytest.raises(ValueError):
		LatentTrajectory('other', 'a cat', 1., traj.clean_latent, traj.entries)
