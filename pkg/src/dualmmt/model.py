"""Multimodal encoder-decoder translation model.

The encoder concatenates text states with projected visual states to form
joint queries, while keys and values are drawn from the text positions
only; the decoder runs causal self-attention over the target prefix and
cross-attention over the full encoder memory (visual positions includable
or excludable by config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ContractError
from .nn import (Embedding, FeedForward, LayerNorm, Linear, Module,
                 MultiHeadAttention, positional_encoding)
from .tensor import Tensor
from .vocabulary import BOS_ID, PAD_ID


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype):
        self.attn_norm = LayerNorm(cfg.model_dim, dtype=dtype)
        self.attn = MultiHeadAttention(cfg.model_dim, cfg.heads, rng, dtype=dtype)
        self.ffn_norm = LayerNorm(cfg.model_dim, dtype=dtype)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_dim, cfg.model_dim, rng,
                               dtype=dtype)


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype):
        self.self_norm = LayerNorm(cfg.model_dim, dtype=dtype)
        self.self_attn = MultiHeadAttention(cfg.model_dim, cfg.heads, rng, dtype=dtype)
        self.cross_norm = LayerNorm(cfg.model_dim, dtype=dtype)
        self.cross_attn = MultiHeadAttention(cfg.model_dim, cfg.heads, rng, dtype=dtype)
        self.ffn_norm = LayerNorm(cfg.model_dim, dtype=dtype)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_dim, cfg.model_dim, rng,
                               dtype=dtype)


@dataclass
class DecodeState:
    """Autoregressive decoding position: BOS-prefixed ids plus cached memory."""

    prefix: list
    memory: Tensor
    memory_mask: np.ndarray

    def __post_init__(self):
        if not self.prefix or self.prefix[0] != BOS_ID:
            raise ContractError("decode prefix must start with BOS")

    @property
    def step(self) -> int:
        return len(self.prefix) - 1


class MultimodalTransformer(Module):
    """Encoder-decoder over a shared vocabulary with joint text+visual encoding.

    `visual_input_dim` is the width of incoming visual states: the raw
    feature width when no prompt fusion runs in front of the encoder, or
    the model width when it does.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 visual_input_dim: Optional[int] = None, dtype=T.DEFAULT_DTYPE):
        cfg.validate()
        if cfg.vocab_size < 5:
            raise ContractError("vocab_size must cover the special tokens")
        self.cfg = cfg
        self.dtype = dtype
        vis_dim = visual_input_dim if visual_input_dim else cfg.feature_dim
        self.src_embed = Embedding(cfg.vocab_size, cfg.model_dim, rng, dtype=dtype)
        self.tgt_embed = (self.src_embed if cfg.tied_embeddings
                          else Embedding(cfg.vocab_size, cfg.model_dim, rng, dtype=dtype))
        self.visual_proj = Linear(vis_dim, cfg.model_dim, rng, bias=False, dtype=dtype)
        self.encoder = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.enc_layers)]
        self.encoder_norm = LayerNorm(cfg.model_dim, dtype=dtype)
        self.decoder = [DecoderLayer(cfg, rng, dtype) for _ in range(cfg.dec_layers)]
        self.decoder_norm = LayerNorm(cfg.model_dim, dtype=dtype)
        self.out_proj = (None if cfg.tied_output
                         else Linear(cfg.model_dim, cfg.vocab_size, rng, dtype=dtype))
        self.position_table = positional_encoding(cfg.max_len, cfg.model_dim, dtype)
        self.embed_scale = math.sqrt(cfg.model_dim)

    # -- building blocks -------------------------------------------------------

    def _dropout(self, x: Tensor, training: bool, rng) -> Tensor:
        return T.dropout(x, self.cfg.dropout, rng, training)

    def embed_tokens(self, ids: np.ndarray, table: Embedding,
                     training: bool = False, rng=None) -> Tensor:
        ids = np.asarray(ids)
        length = ids.shape[-1]
        if length > self.cfg.max_len:
            raise ContractError(
                f"sequence length {length} exceeds max_len {self.cfg.max_len}")
        x = table(ids) * self.embed_scale + Tensor(self.position_table[:length])
        return self._dropout(x, training, rng)

    def embed_source(self, src_ids: np.ndarray, training: bool = False,
                     rng=None) -> Tensor:
        return self.embed_tokens(src_ids, self.src_embed, training, rng)

    def encode(self, text_states: Tensor, visual_states: Optional[Tensor],
               text_pad: np.ndarray, training: bool = False, rng=None) -> Tensor:
        """Joint multimodal encoding; output length = text len + visual len.

        Queries cover the whole joint sequence; keys/values are restricted
        to the text rows unless `visual_keys` is set.
        """
        batch, n_text, _ = text_states.shape
        if visual_states is not None and visual_states.shape[1] > 0:
            vis = self.visual_proj(visual_states)
            h = T.concat([text_states, vis], axis=1)
        else:
            h = text_states
        text_pad = np.asarray(text_pad, dtype=bool)
        if self.cfg.visual_keys:
            n_keys = h.shape[1]
            key_block = np.concatenate(
                [text_pad, np.zeros((batch, n_keys - n_text), dtype=bool)], axis=1)
        else:
            n_keys = n_text
            key_block = text_pad
        mask = np.broadcast_to(key_block[:, None, :], (batch, h.shape[1], n_keys))
        for layer in self.encoder:
            q = layer.attn_norm(h)
            kv = q if self.cfg.visual_keys else q[:, :n_text, :]
            h = h + self._dropout(layer.attn(q, kv, mask), training, rng)
            h = h + self._dropout(layer.ffn(layer.ffn_norm(h)), training, rng)
        return self.encoder_norm(h)

    def memory_key_mask(self, text_pad: np.ndarray, n_visual: int) -> np.ndarray:
        """Which memory positions the decoder must not attend to."""
        text_pad = np.asarray(text_pad, dtype=bool)
        batch = text_pad.shape[0]
        visual_block = np.full((batch, n_visual),
                               not self.cfg.cross_attend_visual, dtype=bool)
        return np.concatenate([text_pad, visual_block], axis=1)

    def _output_logits(self, h: Tensor) -> Tensor:
        if self.out_proj is not None:
            return self.out_proj(h)
        return T.matmul(h, T.transpose(self.tgt_embed.table))

    def decode(self, memory: Tensor, memory_mask: np.ndarray,
               tgt_in: np.ndarray, training: bool = False, rng=None) -> Tensor:
        """Teacher-forced decoder pass; returns logits [B, M, vocab]."""
        tgt_in = np.asarray(tgt_in)
        batch, m = tgt_in.shape
        h = self.embed_tokens(tgt_in, self.tgt_embed, training, rng)
        causal = np.triu(np.ones((m, m), dtype=bool), k=1)
        self_mask = causal[None] | (tgt_in == PAD_ID)[:, None, :]
        cross_mask = np.broadcast_to(memory_mask[:, None, :],
                                     (batch, m, memory_mask.shape[1]))
        for layer in self.decoder:
            q = layer.self_norm(h)
            h = h + self._dropout(layer.self_attn(q, q, self_mask), training, rng)
            c = layer.cross_norm(h)
            h = h + self._dropout(layer.cross_attn(c, memory, cross_mask),
                                  training, rng)
            h = h + self._dropout(layer.ffn(layer.ffn_norm(h)), training, rng)
        return self._output_logits(self.decoder_norm(h))

    # -- inference entry points --------------------------------------------------

    def forward_teacher_forced(self, src_ids: np.ndarray, src_pad: np.ndarray,
                               visual_states: Optional[Tensor],
                               tgt_in: np.ndarray, training: bool = False,
                               rng=None) -> Tensor:
        """One-pass logits for every target position of a batch."""
        text = self.embed_source(src_ids, training, rng)
        n_visual = visual_states.shape[1] if visual_states is not None else 0
        memory = self.encode(text, visual_states, src_pad, training, rng)
        mem_mask = self.memory_key_mask(src_pad, n_visual)
        return self.decode(memory, mem_mask, tgt_in, training, rng)

    def decode_logprobs(self, memory: Tensor, memory_mask: np.ndarray,
                        prefixes: np.ndarray) -> Tensor:
        """Next-token log-probabilities for a batch of prefixes [B, L]."""
        prefixes = np.asarray(prefixes)
        if prefixes.shape[1] > self.cfg.max_len:
            raise ContractError(
                f"prefix length {prefixes.shape[1]} exceeds max_len {self.cfg.max_len}")
        logits = self.decode(memory, memory_mask, prefixes)
        return T.log_softmax_rows(logits[:, -1, :])

    def decode_step(self, state: DecodeState) -> np.ndarray:
        """Log-probability vector over the vocabulary for the next token."""
        if not state.prefix:
            raise ContractError("decode_step: empty prefix")
        prefix = np.asarray(state.prefix, dtype=np.int64)[None, :]
        return self.decode_logprobs(state.memory, state.memory_mask, prefix).data[0]
