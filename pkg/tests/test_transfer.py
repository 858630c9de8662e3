"""Test x0transfer.transfer"""

import pytest
import torch

from x0transfer.errors import ConfigError, DomainError, ShapeError
from x0transfer.masking import ObjectMask
from x0transfer.transfer import TransferParams, transfer_x0, transfer_delta


def half_mask(n=8):
	data = torch.zeros(n, n, dtype=torch.bool)
	data[:, :n // 2] = True
	return ObjectMask(data)


def test_params():
	p = TransferParams()
	assert (p.delta, p.lambda_, p.gamma) == (0.6, 0.2, 0.2)
	assert (p.start_step, p.end_step) == (12, 21)
	assert p.matching_mode == 'progressive'
	assert p.match_threshold is None

	assert p.in_window(12)
	assert p.in_window(20)
	assert not p.in_window(21)
	assert not p.in_window(11)

	p.check_steps(50)
	with pytest.raises(ConfigError):
		p.check_steps(20)

	for kw in [
		dict(delta=1.5), dict(lambda_=-0.1), dict(gamma=2.), dict(mask_threshold=1.1),
		dict(start_step=5, end_step=5), dict(start_step=-1), dict(matching_mode='other'),
		dict(match_threshold=1.5),
	]:
		with pytest.raises(ConfigError):
			TransferParams(**kw)


def test_identity_cases():
	gen = torch.Generator().manual_seed(0)
	src = torch.randn(4, 8, 8, generator=gen)
	tar = torch.randn(4, 8, 8, generator=gen)

	assert torch.equal(transfer_x0(src, tar, ObjectMask.full((8, 8)), 0.), src)
	assert torch.equal(transfer_x0(src, tar, torch.zeros(8, 8), 0.6), src)
	assert torch.equal(transfer_x0(src, tar, ObjectMask.full((8, 8)), 1.), tar)


def test_value():
	out = transfer_x0(torch.ones(4, 8, 8), torch.zeros(4, 8, 8), ObjectMask.full((8, 8)), 0.6)
	assert torch.allclose(out, torch.full((4, 8, 8), 0.4))


def test_background():
	gen = torch.Generator().manual_seed(1)
	src = torch.randn(4, 8, 8, generator=gen)
	tar = torch.randn(4, 8, 8, generator=gen)
	m = half_mask()

	out = transfer_x0(src, tar, m, 0.6)
	assert torch.equal(out[:, :, 4:], src[:, :, 4:])
	assert not torch.equal(out[:, :, :4], src[:, :, :4])

	# The residual is supported on the mask and equals M * delta * (tar - src)
	tdelta = transfer_delta(out, src)
	assert tdelta.dtype == torch.float64
	assert torch.equal(tdelta[:, :, 4:], torch.zeros(4, 8, 4, dtype=torch.float64))
	expected = m.as_float(torch.float64) * 0.6 * (tar - src).double()
	assert torch.allclose(tdelta, expected, rtol=0, atol=1e-6)


def test_delta_add_back():
	gen = torch.Generator().manual_seed(2)

	for k in range(100):
		scale = 10. ** (k % 5 - 2)
		src = torch.randn(4, 8, 8, generator=gen) * scale
		tar = torch.randn(4, 8, 8, generator=gen)

		tdelta = transfer_delta(tar, src)
		assert torch.equal(src + tdelta, tar.double())
		assert torch.equal((src + tdelta).to(src.dtype), tar)

		m = torch.rand(8, 8, generator=gen) < 0.5
		out = transfer_x0(src, tar, m, 0.6)
		assert torch.equal((src + transfer_delta(out, src)).float(), out)


def test_affine_in_delta():
	gen = torch.Generator().manual_seed(3)
	src = torch.randn(4, 8, 8, generator=gen)
	tar = torch.randn(4, 8, 8, generator=gen)
	m = half_mask()

	lo = transfer_x0(src, tar, m, 0.)
	hi = transfer_x0(src, tar, m, 1.)
	for d in [0.1, 0.25, 0.5, 0.6, 0.9]:
		out = transfer_x0(src, tar, m, d)
		assert torch.equal(out[:, :, 4:], src[:, :, 4:])
		assert torch.allclose(out[:, :, :4], torch.lerp(lo, hi, d)[:, :, :4], rtol=0, atol=1e-6)
		assert torch.allclose(out - lo, d * (hi - lo), rtol=0, atol=1e-6)

def test_errors():
	x = torch.zeros(4, 8, 8)
	m = ObjectMask.full((8, 8))

	with pytest.raises(DomainError):
		transfer_x0(x, x, m, 1.2)
	with pytest.raises(ShapeError):
		transfer_x0(x, torch.zeros(4, 8, 4), m, 0.5)
	with pytest.raises(ShapeError):
		transfer_x0(x, x, ObjectMask.full((4, 4)), 0.5)
	with pytest.raises(ShapeError):
		transfer_delta(x, torch.zeros(3, 8, 8))
