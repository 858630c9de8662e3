"""Backend wrapping a Stable Diffusion model loaded through ``diffusers``."""

import logging

import numpy as np
import torch

from .base import DiffusionBackend, TextEmbedding, FeatureMap, AttentionCapture, resample_to_grid
from ..errors import BackendError, ConfigError, ShapeError


logger = logging.getLogger(__name__)


class RecordingAttnProcessor:
	"""Attention processor which records cross-attention probabilities.

	Computes attention exactly like the default diffusers processor, passing
	the probabilities of cross-attention calls to ``store``.
	"""

	def __init__(self, store, name):
		self.store = store
		self.name = name

	def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kwargs):
		batch_size, sequence_length, _ = hidden_states.shape
		attention_mask = attn.prepare_attention_mask(attention_mask, sequence_length, batch_size)

		query = attn.to_q(hidden_states)
		is_cross = encoder_hidden_states is not None
		encoder_hidden_states = hidden_states if encoder_hidden_states is None else encoder_hidden_states
		key = attn.to_k(encoder_hidden_states)
		value = attn.to_v(encoder_hidden_states)

		query = attn.head_to_batch_dim(query)
		key = attn.head_to_batch_dim(key)
		value = attn.head_to_batch_dim(value)

		attention_probs = attn.get_attention_scores(query, key, attention_mask)
		if is_cross:
			self.store(self.name, attention_probs, attn.heads)

		hidden_states = torch.bmm(attention_probs, value)
		hidden_states = attn.batch_to_head_dim(hidden_states)
		hidden_states = attn.to_out[0](hidden_states)
		hidden_states = attn.to_out[1](hidden_states)
		return hidden_states


class DiffusersBackend(DiffusionBackend):
	"""Stable Diffusion (v1.x) backend.

	Parameters
	----------
	model_id : str
		Hugging Face model identifier or local path.
	device : str
		Torch device. Defaults to CUDA if available.
	dift_layer : int
		Index of the U-Net up block whose output is used as DIFT features.
	dift_prompt : str
		Prompt used when extracting DIFT features.
	attention_resolution : int
		Side length of the cross-attention maps which are captured.
	seed : int
		Seed of the DIFT re-noising.
	"""

	supports_embedding_grad = True

	def __init__(self, model_id='CompVis/stable-diffusion-v1-4', device=None, dift_layer=1, dift_prompt='',
	             attention_resolution=16, seed=0, dtype=torch.float32):
		super().__init__(dict(
			model_id=model_id, dift_layer=dift_layer, dift_prompt=dift_prompt,
			attention_resolution=attention_resolution, seed=seed,
		))
		from diffusers import StableDiffusionPipeline

		if device is None:
			device = 'cuda' if torch.cuda.is_available() else 'cpu'
		self.device = torch.device(device)
		self.dtype = dtype

		try:
			pipe = StableDiffusionPipeline.from_pretrained(model_id, torch_dtype=dtype, safety_checker=None)
		except (OSError, ValueError) as exc:
			raise BackendError('Could not load model %r: %s' % (model_id, exc)) from exc

		pipe = pipe.to(self.device)
		self.unet = pipe.unet
		self.vae = pipe.vae
		self.tokenizer = pipe.tokenizer
		self.text_encoder = pipe.text_encoder
		self.alphas_cumprod = pipe.scheduler.alphas_cumprod
		for module in (self.unet, self.vae, self.text_encoder):
			module.requires_grad_(False)
			module.eval()

		self.vae_scale = 2 ** (len(self.vae.config.block_out_channels) - 1)
		self.scaling_factor = self.vae.config.scaling_factor
		self._image_size = self.unet.config.sample_size * self.vae_scale
		self._latent_shape = (self.unet.config.in_channels, self.unet.config.sample_size, self.unet.config.sample_size)
		self.dift_layer = dift_layer
		self.dift_prompt = dift_prompt
		self.attention_resolution = attention_resolution
		self.seed = seed

	@property
	def latent_shape(self):
		return self._latent_shape

	@property
	def image_size(self):
		return self._image_size

	def _unet(self, x, t, context):
		return self.unet(x.to(self.device, self.dtype), t, encoder_hidden_states=context).sample

	def predict_noise_single(self, x, t, embedding):
		self.check_latent(x)
		return self._unet(x[None], t, embedding.data[None])[0].to(x.dtype)

	def predict_noise(self, x, t, cond, uncond, guidance_scale):
		self.check_latent(x)
		x_in = torch.stack([x, x])
		context = torch.stack([uncond.data, cond.data])
		eps_uncond, eps_cond = self._unet(x_in, t, context).to(x.dtype)
		return eps_uncond + guidance_scale * (eps_cond - eps_uncond)

	@torch.no_grad()
	def encode_image(self, image):
		image = np.asarray(image)
		if image.ndim != 3 or image.shape[2] != 3:
			raise ShapeError('Expected RGB image of shape (H, W, 3), got %s' % (image.shape,))
		pixels = torch.from_numpy(image).float() / 127.5 - 1
		pixels = pixels.permute(2, 0, 1)[None].to(self.device, self.dtype)
		latent = self.vae.encode(pixels).latent_dist.mean * self.scaling_factor
		return latent[0].float()

	@torch.no_grad()
	def decode_latent(self, x0):
		latent = x0.detach()[None].to(self.device, self.dtype) / self.scaling_factor
		image = self.vae.decode(latent).sample[0]
		image = (image / 2 + 0.5).clamp(0, 1)
		return (image.permute(1, 2, 0).float().cpu().numpy() * 255).round().astype(np.uint8)

	def _tokenize(self, prompt):
		return self.tokenizer(
			[prompt], padding='max_length', max_length=self.tokenizer.model_max_length,
			truncation=True, return_tensors='pt',
		)

	@torch.no_grad()
	def embed_text(self, prompt):
		ids = self._tokenize(prompt).input_ids.to(self.device)
		data = self.text_encoder(ids)[0][0].float()
		kind = 'unconditional' if prompt == '' else 'conditional'
		return TextEmbedding(data, kind, prompt)

	def token_indices(self, prompt, word):
		# Word pieces are matched by decoding each token, as in prompt-to-prompt
		ids = self.tokenizer.encode(prompt)
		pieces = [self.tokenizer.decode([i]).strip('#').strip() for i in ids[1:-1]]
		targets = [self.tokenizer.decode([i]).strip('#').strip() for i in self.tokenizer.encode(word)[1:-1]]
		if not targets:
			return []

		for start in range(len(pieces) - len(targets) + 1):
			if pieces[start:start + len(targets)] == targets:
				return [start + 1 + k for k in range(len(targets))]
		return []

	@torch.no_grad()
	def extract_dift_features(self, x0, t, layer=None):
		layer = self.dift_layer if layer is None else layer
		if not isinstance(layer, int) or not 0 <= layer < len(self.unet.up_blocks):
			raise ConfigError('Unknown DIFT layer %r, expected an up block index < %d' % (layer, len(self.unet.up_blocks)))
		self.check_latent(x0)

		gen = torch.Generator().manual_seed(self.seed)
		noise = torch.randn(x0.shape, generator=gen).to(x0)
		a = float(self.alphas_cumprod[t])
		x_t = a ** 0.5 * x0 + (1 - a) ** 0.5 * noise

		captured = {}

		def hook(module, inputs, output):
			captured['features'] = output

		handle = self.unet.up_blocks[layer].register_forward_hook(hook)
		try:
			context = self.embed_text(self.dift_prompt).data[None]
			self._unet(x_t[None], t, context)
		finally:
			handle.remove()

		return FeatureMap(captured['features'][0].float(), t, layer)

	@torch.no_grad()
	def capture_cross_attention(self, x, t, cond, token_indices):
		self.check_latent(x)
		ntokens = cond.data.shape[0]
		self.check_token_indices(token_indices, ntokens)
		res = self.attention_resolution
		maps = {}

		def store(name, probs, heads):
			if probs.shape[1] != res * res:
				return
			probs = probs.reshape(-1, heads, res, res, ntokens)[-1]
			selected = probs[..., list(token_indices)].permute(0, 3, 1, 2).float()
			maps[name] = resample_to_grid(selected, self.latent_grid)

		original = self.unet.attn_processors
		self.unet.set_attn_processor({
			name: RecordingAttnProcessor(store, name) if name.endswith('attn2.processor') else proc
			for name, proc in original.items()
		})
		try:
			self._unet(x[None], t, cond.data[None])
		finally:
			self.unet.set_attn_processor(original)

		if not maps:
			raise BackendError('No cross-attention layers at resolution %d' % res)
		return AttentionCapture(maps, token_indices, t)
