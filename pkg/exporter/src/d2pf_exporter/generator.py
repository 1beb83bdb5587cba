"""Text-to-image generation for the reconstructed branch.

The sampler is a compact latent-diffusion loop: per-sentence seeded
Gaussian latents are denoised for a fixed number of steps with
classifier-free guidance and decoded to an RGB image. Text conditioning
is pluggable: a pretrained CLIP text encoder when weights are reachable,
or a deterministic hash embedding for fully offline runs. Given the same
settings, seed and software stack, generation is repeatable byte for
byte.
"""

from __future__ import annotations

import hashlib
from typing import List, Optional

import numpy as np
import torch
from PIL import Image
from torch import nn
from torch.nn import functional as F

PRETRAINED_TEXT_ENCODER = "openai/clip-vit-large-patch14"


class HashTextConditioner:
    """Deterministic sentence embedding; same text, same vector, any host."""

    def __init__(self, dim: int = 64):
        self.dim = dim

    def __call__(self, texts: List[str]) -> torch.Tensor:
        rows = []
        for text in texts:
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            rows.append(np.random.default_rng(seed).standard_normal(self.dim))
        return torch.tensor(np.stack(rows), dtype=torch.float32)


class CLIPTextConditioner:
    """Pooled text embeddings from a pretrained CLIP text tower."""

    def __init__(self, model_name: str = PRETRAINED_TEXT_ENCODER):
        from transformers import CLIPTextModelWithProjection, CLIPTokenizer
        self.tokenizer = CLIPTokenizer.from_pretrained(model_name)
        self.model = CLIPTextModelWithProjection.from_pretrained(model_name)
        self.model.eval()
        self.dim = self.model.config.projection_dim

    @torch.no_grad()
    def __call__(self, texts: List[str]) -> torch.Tensor:
        tokens = self.tokenizer(texts, padding=True, truncation=True,
                                return_tensors="pt")
        return self.model(**tokens).text_embeds.float()


class _ConditionedDenoiser(nn.Module):
    """Small convolutional noise predictor with feature-wise conditioning."""

    def __init__(self, latent_channels: int, cond_dim: int, width: int = 32):
        super().__init__()
        self.inlet = nn.Conv2d(latent_channels, width, 3, padding=1)
        self.film = nn.Linear(cond_dim + 1, 2 * width)
        self.middle = nn.Conv2d(width, width, 3, padding=1)
        self.outlet = nn.Conv2d(width, latent_channels, 3, padding=1)

    def forward(self, latent: torch.Tensor, timestep: torch.Tensor,
                condition: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.inlet(latent))
        gates = self.film(torch.cat([condition, timestep[:, None]], dim=1))
        scale, shift = gates.chunk(2, dim=1)
        h = h * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = F.silu(self.middle(h))
        return self.outlet(h)


class _LatentDecoder(nn.Module):
    """Latent plane to RGB; stands in for the VAE decoder."""

    def __init__(self, latent_channels: int, upscale: int = 8):
        super().__init__()
        self.expand = nn.Conv2d(latent_channels, 3 * upscale * upscale, 3,
                                padding=1)
        self.shuffle = nn.PixelShuffle(upscale)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.shuffle(self.expand(latent)))


class LatentImageGenerator:
    """Guided denoising from seeded noise to an RGB image per sentence.

    Network weights initialize from `weights_seed`; pass a state-dict path
    through `weights` to reuse trained parameters instead. Per-sentence
    latents derive from (seed, sentence index), so regenerating any subset
    reproduces the full run's bytes.
    """

    def __init__(self, conditioner=None, image_size: int = 64,
                 latent_channels: int = 4, steps: int = 50,
                 guidance: float = 7.5, seed: int = 47,
                 weights_seed: int = 0, weights: Optional[str] = None):
        if image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        self.conditioner = conditioner or HashTextConditioner()
        self.image_size = image_size
        self.latent_side = image_size // 8
        self.latent_channels = latent_channels
        self.steps = steps
        self.guidance = guidance
        self.seed = seed
        torch.manual_seed(weights_seed)
        self.denoiser = _ConditionedDenoiser(latent_channels,
                                             self.conditioner.dim)
        self.decoder = _LatentDecoder(latent_channels)
        if weights is not None:
            state = torch.load(weights, map_location="cpu")
            self.denoiser.load_state_dict(state["denoiser"])
            self.decoder.load_state_dict(state["decoder"])
        self.denoiser.eval()
        self.decoder.eval()
        betas = torch.linspace(1e-4, 0.02, steps)
        self.alpha_bars = torch.cumprod(1.0 - betas, dim=0)

    def _initial_latent(self, sentence_id: int) -> torch.Tensor:
        mix = np.random.SeedSequence([self.seed & 0x7FFFFFFF, sentence_id])
        gen = torch.Generator().manual_seed(int(mix.generate_state(1)[0]))
        return torch.randn(1, self.latent_channels, self.latent_side,
                           self.latent_side, generator=gen)

    @torch.no_grad()
    def _predict(self, latent, step_index, condition):
        timestep = torch.full((latent.shape[0],),
                              step_index / max(self.steps - 1, 1))
        conditional = self.denoiser(latent, timestep, condition)
        unconditional = self.denoiser(latent, timestep,
                                      torch.zeros_like(condition))
        return unconditional + self.guidance * (conditional - unconditional)

    @torch.no_grad()
    def generate(self, texts: List[str],
                 sentence_ids: Optional[List[int]] = None) -> List[Image.Image]:
        """One image per input sentence, deterministic per (seed, id)."""
        if sentence_ids is None:
            sentence_ids = list(range(len(texts)))
        conditions = self.conditioner(texts)
        images = []
        for sid, condition in zip(sentence_ids, conditions):
            latent = self._initial_latent(sid)
            cond = condition[None, :]
            for i in reversed(range(self.steps)):
                abar = self.alpha_bars[i]
                abar_prev = self.alpha_bars[i - 1] if i > 0 else torch.tensor(1.0)
                eps = self._predict(latent, i, cond)
                v0_hat = (latent - torch.sqrt(1 - abar) * eps) / torch.sqrt(abar)
                latent = (torch.sqrt(abar_prev) * v0_hat
                          + torch.sqrt(1 - abar_prev) * eps)
            rgb = self.decoder(latent)[0]
            array = ((rgb.clamp(-1, 1) + 1) * 127.5).round().byte()
            images.append(Image.fromarray(
                array.permute(1, 2, 0).numpy(), mode="RGB"))
        return images
