"""Test x0transfer.masking"""

import logging

import pytest
import torch

from x0transfer.backend import MockBackend, AttentionCapture
from x0transfer.errors import ContractError, DomainError, ShapeError
from x0transfer.masking import ObjectMask, aggregate_attention, extract_object_mask


def capture(maps, tokens=(1,), t=500):
	return AttentionCapture({'layer': maps}, list(tokens), t)


def test_constant_map(caplog):
	maps = torch.full((2, 1, 4, 4), 0.3)
	with caplog.at_level(logging.WARNING, logger='x0transfer.masking'):
		mask = extract_object_mask([capture(maps)], [1], 0.5)
	assert mask.data.all()
	assert mask.count == 16
	assert 'constant' in caplog.text


def test_threshold():
	values = torch.arange(16, dtype=torch.float64).reshape(1, 1, 4, 4)
	cap = capture(values)

	mask = extract_object_mask([cap], [1], 0.5)
	assert torch.allclose(mask.aggregate, values[0, 0] / 15)
	assert torch.equal(mask.data, values[0, 0] / 15 >= 0.5)

	# Threshold 1 keeps only the maximum, threshold 0 keeps everything
	top = extract_object_mask([cap], [1], 1.)
	assert top.count == 1
	assert top.data[3, 3]
	assert extract_object_mask([cap], [1], 0.).count == 16

	with pytest.raises(DomainError):
		extract_object_mask([cap], [1], 1.5)


def test_monotone(backend):
	x = torch.zeros(backend.latent_shape)
	caps = [backend.capture_cross_attention(x, t, backend.embed_text('a cat'), [2]) for t in (800, 600)]
	masks = [extract_object_mask(caps, [2], th) for th in (0.2, 0.4, 0.6, 0.8)]
	for a, b in zip(masks, masks[1:]):
		assert torch.all(a.data | ~b.data)
		assert a.count >= b.count


def test_mock_blob():
	b = MockBackend(token_count=3, attention_centers={2: (5, 10)})
	x = torch.zeros(b.latent_shape)
	cap = b.capture_cross_attention(x, 500, b.embed_text('a cat'), [2])
	mask = extract_object_mask([cap], [2], 0.5)

	assert mask.data[5, 10]
	assert not mask.data[15, 0]
	assert 0 < mask.count < 256


def test_aggregate():
	a = capture(torch.zeros(1, 2, 4, 4), (1, 2))
	b = capture(torch.ones(1, 2, 4, 4), (1, 2))
	assert torch.allclose(aggregate_attention([a, b]), torch.full((4, 4), 0.5))

	with pytest.raises(ShapeError):
		aggregate_attention([a, capture(torch.ones(1, 2, 8, 8), (1, 2))])


def test_contract():
	with pytest.raises(ContractError):
		extract_object_mask([], [1])
	with pytest.raises(ContractError):
		extract_object_mask([capture(torch.rand(1, 1, 4, 4), (1,))], [2])


def test_object_mask(tmp_path):
	mask = ObjectMask.full((4, 6))
	assert mask.grid == (4, 6)
	assert mask.count == 24
	assert mask.as_float().dtype == torch.float32

	with pytest.raises(ShapeError):
		ObjectMask(torch.ones(2, 3, 4))

	data = torch.zeros(8, 8, dtype=torch.bool)
	data[2:5, 1:7] = True
	path = tmp_path / 'mask.png'
	ObjectMask(data).save_png(path)

	assert torch.equal(ObjectMask.from_image(path, (8, 8)).data, data)
	# Nearest-neighbor downsampling of 2x2 blocks
	assert ObjectMask.from_image(path, (4, 4)).grid == (4, 4)
