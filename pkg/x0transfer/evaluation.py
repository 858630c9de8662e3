"""CLIP similarity scores of transfer outputs."""

import csv
import hashlib
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import EvaluationError, BackendError
from .io import read_json, write_json, to_jsonable


logger = logging.getLogger(__name__)


class ImageTextEmbedder(ABC):
	"""Embeds images and texts into a joint space."""

	@abstractmethod
	def embed_image(self, image):
		"""Embed an RGB ``uint8`` array.

		Returns
		-------
		torch.Tensor
			1-D embedding.
		"""

	@abstractmethod
	def embed_text(self, text):
		"""Embed a text.

		Returns
		-------
		torch.Tensor
			1-D embedding.
		"""


class ClipEmbedder(ImageTextEmbedder):
	"""CLIP embeddings through the ``transformers`` library.

	Parameters
	----------
	model_id : str
	device : str
	"""

	def __init__(self, model_id='openai/clip-vit-base-patch32', device=None):
		try:
			from transformers import CLIPModel, CLIPProcessor
		except ImportError as exc:
			raise BackendError('The CLIP embedder requires the "diffusion" extra: %s' % exc) from exc

		self.model_id = model_id
		self.device = device or ('cuda' if torch.cuda.is_available() else 'cpu')
		try:
			self.model = CLIPModel.from_pretrained(model_id).to(self.device).eval()
			self.processor = CLIPProcessor.from_pretrained(model_id)
		except OSError as exc:
			raise BackendError('Could not load CLIP model %r: %s' % (model_id, exc)) from exc

	@torch.no_grad()
	def embed_image(self, image):
		inputs = self.processor(images=Image.fromarray(np.asarray(image, dtype=np.uint8)), return_tensors='pt')
		return self.model.get_image_features(**inputs.to(self.device))[0].float().cpu()

	@torch.no_grad()
	def embed_text(self, text):
		inputs = self.processor(text=[text], return_tensors='pt', padding=True, truncation=True)
		return self.model.get_text_features(**inputs.to(self.device))[0].float().cpu()


class MockEmbedder(ImageTextEmbedder):
	"""Deterministic embedder without model weights.

	Images are average-pooled to a small grid and projected with a seeded random
	matrix. Texts get hash-seeded random vectors.
	"""

	def __init__(self, dim=64, seed=0, pool=8):
		self.dim = dim
		self.seed = seed
		self.pool = pool
		gen = torch.Generator().manual_seed(seed)
		self.projection = torch.randn(dim, 3 * pool * pool, generator=gen, dtype=torch.float64)

	def embed_image(self, image):
		pixels = torch.from_numpy(np.asarray(image, dtype=np.float64) / 255.).permute(2, 0, 1)
		pooled = F.adaptive_avg_pool2d(pixels[None], self.pool)[0]
		return self.projection @ (pooled.flatten() - 0.5)

	def embed_text(self, text):
		digest = hashlib.sha256(('%d:%s' % (self.seed, text)).encode('utf8')).digest()
		gen = torch.Generator().manual_seed(int.from_bytes(digest[:8], 'little') & 0x7fffffffffffffff)
		return torch.randn(self.dim, generator=gen, dtype=torch.float64)


def cosine(a, b):
	"""Cosine similarity of two 1-D embeddings as a float."""
	return F.cosine_similarity(a.double().flatten(), b.double().flatten(), dim=0).item()


def clip_t2i(image, prompt, embedder):
	"""Similarity between an image and a prompt."""
	return cosine(embedder.embed_image(image), embedder.embed_text(prompt))


def clip_i2i(image_a, image_b, embedder):
	"""Similarity between two images."""
	return cosine(embedder.embed_image(image_a), embedder.embed_image(image_b))


@dataclass
class PairScore:
	"""Scores of one manifest entry.

	``clip_t2i`` and ``clip_i2i`` are None when files were missing.
	"""
	output: str
	prompt: str
	source: str
	clip_t2i: Optional[float] = None
	clip_i2i: Optional[float] = None
	missing: List[str] = field(default_factory=list)

	@property
	def ok(self):
		return not self.missing


@dataclass
class EvalReport:
	"""Per-pair scores and their means over all scored pairs."""
	pairs: List[PairScore]

	@property
	def scored(self):
		return [p for p in self.pairs if p.ok]

	@property
	def count(self):
		return len(self.scored)

	@property
	def mean_t2i(self):
		return float(np.mean([p.clip_t2i for p in self.scored]))

	@property
	def mean_i2i(self):
		return float(np.mean([p.clip_i2i for p in self.scored]))

	def to_dict(self):
		return {
			'count': self.count,
			'mean_clip_t2i': self.mean_t2i,
			'mean_clip_i2i': self.mean_i2i,
			'pairs': to_jsonable(self.pairs),
		}

	def write_json(self, path):
		write_json(path, self.to_dict())

	def write_csv(self, path):
		"""One row per pair, missing scores left empty."""
		with open(path, 'w', newline='', encoding='utf8') as f:
			writer = csv.writer(f)
			writer.writerow(['output', 'prompt', 'source', 'clip_t2i', 'clip_i2i', 'missing'])
			for p in self.pairs:
				writer.writerow([
					p.output, p.prompt, p.source,
					'' if p.clip_t2i is None else '%.6f' % p.clip_t2i,
					'' if p.clip_i2i is None else '%.6f' % p.clip_i2i,
					';'.join(p.missing),
				])


def _read_rgb(path):
	try:
		with Image.open(path) as img:
			return np.asarray(img.convert('RGB'), dtype=np.uint8).copy()
	except OSError as exc:
		raise EvaluationError('Cannot read image %s: %s' % (path, exc)) from exc


def read_manifest(manifest, base_dir=None):
	"""Parse an evaluation manifest.

	Parameters
	----------
	manifest : str or pathlib.Path or list
		JSON file or already-loaded list of ``{output, prompt, source}`` objects.
	base_dir : pathlib.Path
		Directory relative paths are resolved against. Defaults to the
		directory of the manifest file.

	Returns
	-------
	list of tuple
		``(output, prompt, source)`` with resolved paths.

	Raises
	------
	.EvaluationError
	"""
	if isinstance(manifest, (str, Path)):
		path = Path(manifest)
		try:
			entries = read_json(path)
		except (OSError, ValueError) as exc:
			raise EvaluationError('Cannot read manifest %s: %s' % (path, exc)) from None
		base_dir = path.parent if base_dir is None else Path(base_dir)
	else:
		entries = manifest
		base_dir = Path('.') if base_dir is None else Path(base_dir)

	if not isinstance(entries, list):
		raise EvaluationError('Manifest must be a JSON list')
	if not entries:
		raise EvaluationError('Manifest is empty')

	out = []
	for i, entry in enumerate(entries):
		try:
			out.append((base_dir / entry['output'], entry['prompt'], base_dir / entry['source']))
		except (KeyError, TypeError):
			raise EvaluationError('Manifest entry %d needs "output", "prompt" and "source"' % i) from None
	return out


def evaluate_directory(manifest, embedder, base_dir=None):
	"""Score every (output, prompt, source) triple of a manifest.

	Entries with missing or unreadable files are listed in the report and left
	out of the means.

	Parameters
	----------
	manifest : str or pathlib.Path or list
	embedder : .ImageTextEmbedder
	base_dir : pathlib.Path

	Returns
	-------
	.EvalReport

	Raises
	------
	.EvaluationError
		If the manifest is empty or no entry could be scored.
	"""
	pairs = []
	for output, prompt, source in read_manifest(manifest, base_dir):
		pair = PairScore(str(output), prompt, str(source))
		pair.missing = [str(p) for p in (output, source) if not p.is_file()]

		if pair.missing:
			logger.warning('Skipping %s, missing files: %s', output, ', '.join(pair.missing))
		else:
			images = {}
			for p in (output, source):
				try:
					images[p] = _read_rgb(p)
				except EvaluationError as exc:
					logger.warning('Skipping %s: %s', output, exc)
					pair.missing.append(str(p))
			if not pair.missing:
				pair.clip_t2i = clip_t2i(images[output], prompt, embedder)
				pair.clip_i2i = clip_i2i(images[source], images[output], embedder)
		pairs.append(pair)

	report = EvalReport(pairs)
	if report.count == 0:
		raise EvaluationError('No manifest entry could be scored')
	return report
