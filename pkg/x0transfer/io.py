"""Read and write latent arrays and JSON data.

Arrays are stored in a small self-describing binary format::

	b"X0TA"            magic
	u16                format version (1)
	u32                length of the header in bytes
	header             UTF-8 JSON object {shape, dtype, role, timestep}
	payload            little-endian float32 values in row-major order

All integers are little-endian.
"""

import json
import struct
from dataclasses import is_dataclass, fields
from pathlib import PurePath

import numpy as np
import torch


MAGIC = b'X0TA'
VERSION = 1
_PREFIX = struct.Struct('<4sHI')
_DTYPE = np.dtype('<f4')


def encode_array(tensor, role, timestep=None):
	"""Encode an array in the archive format.

	Parameters
	----------
	tensor : torch.Tensor or numpy.ndarray
	role : str
		What the array holds (e.g. ``'latent'``, ``'predicted_x0'``).
	timestep : int
		Timestep the array belongs to, if any.

	Returns
	-------
	bytes
	"""
	if isinstance(tensor, torch.Tensor):
		tensor = tensor.detach().cpu().numpy()
	array = np.ascontiguousarray(tensor, dtype=_DTYPE)

	header = {
		'shape': list(array.shape),
		'dtype': 'f32',
		'role': role,
		'timestep': timestep,
	}
	header_bytes = json.dumps(header, sort_keys=True).encode('utf8')
	return _PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + array.tobytes()


def decode_array(data):
	"""Decode an array from the archive format.

	Parameters
	----------
	data : bytes

	Returns
	-------
	tuple
		``(tensor, header)`` where ``tensor`` is a float32 :class:`torch.Tensor`
		and ``header`` the decoded header dict.

	Raises
	------
	ValueError
		If the data is not a valid archive.
	"""
	if len(data) < _PREFIX.size:
		raise ValueError('Array archive truncated: %d bytes' % len(data))

	magic, version, header_len = _PREFIX.unpack_from(data)
	if magic != MAGIC:
		raise ValueError('Not an array archive (magic %r)' % magic)
	if version != VERSION:
		raise ValueError('Unsupported array archive version %d' % version)

	start = _PREFIX.size
	if len(data) < start + header_len:
		raise ValueError('Array archive header truncated')
	try:
		header = json.loads(data[start:start + header_len].decode('utf8'))
	except ValueError as exc:
		raise ValueError('Invalid array archive header: %s' % exc) from None

	if header.get('dtype') != 'f32':
		raise ValueError('Unsupported array dtype %r' % header.get('dtype'))

	shape = tuple(header['shape'])
	payload = data[start + header_len:]
	expected = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
	if len(payload) != expected:
		raise ValueError('Array archive payload has %d bytes, expected %d' % (len(payload), expected))

	array = np.frombuffer(payload, dtype=_DTYPE).reshape(shape)
	return torch.from_numpy(array.astype(np.float32)), header


def write_array(path, tensor, role, timestep=None):
	"""Write an array to a file in the archive format."""
	with open(path, 'wb') as f:
		f.write(encode_array(tensor, role, timestep))


def read_array(path):
	"""Read an array archive file.

	Returns
	-------
	tuple
		``(tensor, header)``, see :func:`.decode_array`.
	"""
	with open(path, 'rb') as f:
		return decode_array(f.read())


def to_jsonable(value):
	"""Convert a value to plain JSON types.

	Handles dataclasses, dicts, sequences, paths, numpy scalars and
	single-element tensors.
	"""
	if is_dataclass(value) and not isinstance(value, type):
		return {f.name: to_jsonable(getattr(value, f.name)) for f in fields(value)}
	if isinstance(value, dict):
		return {str(k): to_jsonable(v) for k, v in value.items()}
	if isinstance(value, (list, tuple)):
		return [to_jsonable(v) for v in value]
	if isinstance(value, PurePath):
		return str(value)
	if isinstance(value, torch.Tensor):
		if value.numel() != 1:
			raise TypeError('Only single-element tensors can be converted to JSON')
		return value.item()
	if isinstance(value, np.generic):
		return value.item()
	if isinstance(value, torch.dtype):
		return str(value)
	if value is None or isinstance(value, (bool, int, float, str)):
		return value
	raise TypeError('Cannot convert %s to JSON' % type(value).__name__)


def write_json(path, data):
	with open(path, 'w', encoding='utf8') as f:
		json.dump(to_jsonable(data), f, indent=2, sort_keys=True)
		f.write('\n')


def read_json(path):
	with open(path, encoding='utf8') as f:
		return json.load(f)
