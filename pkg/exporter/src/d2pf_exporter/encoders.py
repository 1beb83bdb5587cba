"""CLIP image encoding to per-image feature matrices.

The default model is the pretrained ViT-B/32 checkpoint (downloaded or
cached by `transformers`); fully offline runs can instead instantiate a
small randomly initialized CLIP vision tower from a local config with a
fixed seed, which keeps the whole pipeline deterministic end to end.
Features are the projected patch tokens (one row per token, class token
first); `pooled` switches to the single projected image embedding.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from PIL import Image
from transformers import (CLIPImageProcessor, CLIPVisionConfig,
                          CLIPVisionModelWithProjection)

PRETRAINED_VIT_B32 = "openai/clip-vit-base-patch32"

TINY_VISION_CONFIG = dict(
    hidden_size=64,
    intermediate_size=128,
    num_hidden_layers=2,
    num_attention_heads=2,
    image_size=32,
    patch_size=8,
    projection_dim=32,
)


class CLIPImageEncoder:
    def __init__(self, model_name: Optional[str] = PRETRAINED_VIT_B32,
                 tiny_seed: Optional[int] = None, pooled: bool = False):
        if tiny_seed is not None:
            torch.manual_seed(tiny_seed)
            config = CLIPVisionConfig(**TINY_VISION_CONFIG)
            self.model = CLIPVisionModelWithProjection(config)
        else:
            self.model = CLIPVisionModelWithProjection.from_pretrained(model_name)
        self.model.eval()
        config = self.model.config
        self.pooled = pooled
        side = config.image_size
        self.processor = CLIPImageProcessor(
            size={"shortest_edge": side},
            crop_size={"height": side, "width": side})
        tokens = (side // config.patch_size) ** 2 + 1
        self.feature_shape = (1 if pooled else tokens, config.projection_dim)

    @torch.no_grad()
    def encode(self, image: Image.Image) -> np.ndarray:
        """[K, projection_dim] float32 features for one image."""
        pixels = self.processor(images=image.convert("RGB"),
                                return_tensors="pt")["pixel_values"]
        outputs = self.model(pixel_values=pixels)
        if self.pooled:
            return outputs.image_embeds[0:1].numpy().astype(np.float32)
        hidden = self.model.vision_model(pixel_values=pixels).last_hidden_state
        normed = self.model.vision_model.post_layernorm(hidden)
        projected = normed @ self.model.visual_projection.weight.T
        return projected[0].numpy().astype(np.float32)
