"""Exception classes used throughout the package.

Each class also derives from the closest builtin exception so code catching
``ValueError``, ``KeyError`` etc. keeps working.
"""


class X0TransferError(Exception):
	"""Base class for all errors raised by this package."""


class ShapeError(X0TransferError, ValueError):
	"""Arrays which must agree in shape do not."""


class UnknownTimestepError(X0TransferError, KeyError):
	"""Timestep is not part of the sampling schedule."""

	def __str__(self):
		# KeyError quotes its argument, which reads badly for a message
		return str(self.args[0]) if self.args else ''


class OrderingError(X0TransferError, ValueError):
	"""A DDIM step was requested in the wrong direction."""


class DomainError(X0TransferError, ValueError):
	"""A mixing weight or threshold is outside of its allowed range."""


class ContractError(X0TransferError, RuntimeError):
	"""A precondition of an operation does not hold."""


class ConfigError(X0TransferError, ValueError):
	"""Invalid run or backend configuration."""


class BackendError(X0TransferError, RuntimeError):
	"""The diffusion backend is unavailable or failed."""


class EvaluationError(X0TransferError, ValueError):
	"""Invalid evaluation manifest."""


class StageError(X0TransferError, RuntimeError):
	"""Failure within one stage of a transfer run.

	Attributes
	----------
	stage : str
		Name of the pipeline stage which failed.
	cause : Exception
		The original exception.
	"""

	def __init__(self, stage, cause):
		self.stage = stage
		self.cause = cause
		super().__init__('Stage "%s" failed: %s' % (stage, cause))


def check_same_shape(*tensors, what='latents'):
	"""Raise :class:`.ShapeError` unless all tensors have the same shape."""
	shapes = [tuple(t.shape) for t in tensors]
	if any(s != shapes[0] for s in shapes[1:]):
		raise ShapeError('Shapes of %s do not match: %s' % (what, ', '.join(map(str, shapes))))


def check_unit_interval(value, name):
	"""Raise :class:`.DomainError` unless ``0 <= value <= 1``."""
	if not 0 <= value <= 1:
		raise DomainError('%s must be in [0, 1], got %r' % (name, value))
