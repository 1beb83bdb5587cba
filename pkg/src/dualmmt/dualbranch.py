"""The assembled translation model: prompt pipeline plus transformer.

During training both visual branches run through a shared translation
trunk with branch-specific prompt value projections; at inference only
the reconstructed branch is consulted.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .model import MultimodalTransformer
from .nn import Module
from .prompts import PromptPipeline
from .tensor import Tensor


class DualBranchModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 dtype=T.DEFAULT_DTYPE):
        cfg.validate()
        self.cfg = cfg
        visual_dim = cfg.model_dim if cfg.use_prompts else cfg.feature_dim
        self.prompt_pipeline = (PromptPipeline(cfg, rng, dtype=dtype)
                                if cfg.use_prompts else None)
        self.transformer = MultimodalTransformer(cfg, rng,
                                                 visual_input_dim=visual_dim,
                                                 dtype=dtype)
        if not cfg.share_branch_weights:
            # split trunks: the authentic branch gets its own translation
            # model; inference always decodes through the reconstructed one
            self.transformer_auth = MultimodalTransformer(
                cfg, rng, visual_input_dim=visual_dim, dtype=dtype)

    def trunk(self, branch: str) -> MultimodalTransformer:
        if branch == "auth":
            return getattr(self, "transformer_auth", self.transformer)
        return self.transformer

    def encode_branch(self, branch: str, src: np.ndarray, src_pad: np.ndarray,
                      features: np.ndarray, training: bool = False,
                      rng=None) -> Tuple[Tensor, np.ndarray]:
        """Returns (memory, memory key mask) for one visual branch."""
        trunk = self.trunk(branch)
        text = trunk.embed_source(src, training, rng)
        feats = features if isinstance(features, Tensor) else Tensor(features)
        if self.prompt_pipeline is not None:
            text, visual_states, _ = self.prompt_pipeline.build(branch, feats, text)
        else:
            visual_states = feats
        memory = trunk.encode(text, visual_states, src_pad, training, rng)
        mem_mask = trunk.memory_key_mask(src_pad, visual_states.shape[1])
        return memory, mem_mask

    def branch_logits(self, branch: str, src: np.ndarray, src_pad: np.ndarray,
                      features: np.ndarray, tgt_in: np.ndarray,
                      training: bool = False, rng=None) -> Tensor:
        memory, mem_mask = self.encode_branch(branch, src, src_pad, features,
                                              training, rng)
        return self.trunk(branch).decode(memory, mem_mask, tgt_in, training, rng)
