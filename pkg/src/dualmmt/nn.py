"""Neural layers assembled from the tensor engine.

All layers hold `Parameter` leaves and are pure in forward evaluation:
training-time stochasticity (dropout) always takes an explicit generator
and an explicit `training` flag, never ambient state.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Parameter, Tensor


class Module:
    """Minimal parameter container with deterministic attribute-order walks.

    Shared submodules (tied embeddings, shared projections) are yielded
    once, under the first path that reaches them, so optimizers never see
    the same parameter twice.
    """

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        yield from self._walk_parameters(prefix, set())

    def _walk_parameters(self, prefix: str, seen: set) -> Iterator[Tuple[str, Parameter]]:
        if id(self) in seen:
            return
        seen.add(id(self))
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            items = []
            if isinstance(value, (Parameter, Module)):
                items.append((path, value))
            elif isinstance(value, (list, tuple)):
                items.extend((f"{path}.{i}", item) for i, item in enumerate(value)
                             if isinstance(item, (Parameter, Module)))
            for name, item in items:
                if isinstance(item, Parameter):
                    if id(item) not in seen:
                        seen.add(id(item))
                        item.name = name
                        yield name, item
                else:
                    yield from item._walk_parameters(f"{name}.", seen)

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractError(
                f"state dict mismatch; missing={missing[:5]} extra={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ContractError(
                    f"parameter {name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """Affine map x @ W + b over the trailing dimension."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, dtype=T.DEFAULT_DTYPE):
        self.W = Parameter(glorot_uniform(rng, d_in, d_out, (d_in, d_out), dtype))
        self.b = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.W)
        return out + self.b if self.b is not None else out


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator,
                 dtype=T.DEFAULT_DTYPE):
        self.table = Parameter(
            glorot_uniform(rng, vocab_size, dim, (vocab_size, dim), dtype))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding_lookup(self.table, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=T.DEFAULT_DTYPE):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        centered = x - x.mean(axis=-1, keepdims=True)
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / ((var + self.eps) ** 0.5) * self.gain + self.bias


class FeedForward(Module):
    """Two-layer position-wise network with ReLU."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int,
                 rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        self.inner = Linear(d_in, d_hidden, rng, dtype=dtype)
        self.outer = Linear(d_hidden, d_out, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.relu(self.inner(x)))


class Conv2d(Module):
    """Grouped 2-D convolution with optional asymmetric padding."""

    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator,
                 stride: int = 1, padding=0, groups: int = 1, bias: bool = True,
                 dtype=T.DEFAULT_DTYPE):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        if c_in % groups or c_out % groups:
            raise ConfigError(
                f"conv channels in={c_in} out={c_out} not divisible by groups={groups}")
        fan_in, fan_out = (c_in // groups) * kh * kw, (c_out // groups) * kh * kw
        self.kernel = Parameter(glorot_uniform(
            rng, fan_in, fan_out, (c_out, c_in // groups, kh, kw), dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.kernel, self.stride, self.padding, self.groups)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1)
        return out


def positional_encoding(length: int, dim: int, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    """Sinusoidal position table [length, dim]; position 0 is [0,1,0,1,...]."""
    if length < 1:
        raise ContractError(f"positional_encoding: length must be >=1, got {length}")
    positions = np.arange(length, dtype=np.float64)[:, None]
    pair = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, pair / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : table[:, 1::2].shape[1]])
    return table.astype(dtype)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head splitting.

    Masks mark *disallowed* key positions (True = blocked). A query row
    whose keys are all blocked yields a zero output vector; such rows are
    reported in `last_all_masked` after each call instead of producing NaN.
    """

    def __init__(self, model_dim: int, heads: int, rng: np.random.Generator,
                 dtype=T.DEFAULT_DTYPE):
        if model_dim % heads:
            raise ConfigError(f"model dim {model_dim} not divisible by {heads} heads")
        self.heads = heads
        self.model_dim = model_dim
        self.head_dim = model_dim // heads
        self.wq = Linear(model_dim, model_dim, rng, dtype=dtype)
        # a key bias shifts every key equally, which softmax cancels; leaving
        # it out removes a dead parameter with structurally zero gradient
        self.wk = Linear(model_dim, model_dim, rng, bias=False, dtype=dtype)
        self.wv = Linear(model_dim, model_dim, rng, dtype=dtype)
        self.wo = Linear(model_dim, model_dim, rng, dtype=dtype)
        self.last_all_masked: Optional[np.ndarray] = None

    def _split(self, x: Tensor, batch: int, length: int) -> Tensor:
        return x.reshape(batch, length, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, q_in: Tensor, kv_in: Tensor,
                 mask: Optional[np.ndarray] = None) -> Tensor:
        squeeze = q_in.ndim == 2
        if squeeze:
            q_in = q_in.reshape(1, *q_in.shape)
            kv_in = kv_in.reshape(1, *kv_in.shape)
            if mask is not None:
                mask = np.asarray(mask)[None]
        batch, lq, _ = q_in.shape
        lk = kv_in.shape[1]

        q = self._split(self.wq(q_in), batch, lq)
        k = self._split(self.wk(kv_in), batch, lk)
        v = self._split(self.wv(kv_in), batch, lk)

        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            scores = T.masked_fill(scores, mask[:, None, :, :], -1e30)
            dead_rows = mask.all(axis=-1)  # [batch, lq]
        else:
            dead_rows = np.zeros((batch, lq), dtype=bool)
        self.last_all_masked = dead_rows[0] if squeeze else dead_rows

        weights = T.softmax_rows(scores)
        if dead_rows.any():
            # Fully-blocked rows turned into uniform weights above; zero them.
            weights = weights * Tensor(
                (~dead_rows)[:, None, :, None].astype(weights.dtype))
        self.last_weights = weights.data
        merged = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(batch, lq, -1)
        out = self.wo(merged)
        return out.reshape(lq, self.model_dim) if squeeze else out


def label_smoothed_loss(logits: Tensor, targets: np.ndarray, pad_id: int,
                        smoothing: float = 0.1) -> Tensor:
    """Mean per-token loss over non-PAD targets.

    Each token contributes (1-eps) * NLL(target) + eps * mean NLL over the
    whole vocabulary; eps=0 reduces to the exact negative log-likelihood.
    """
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        targets = np.asarray(targets)[None]
    batch, length, vocab = logits.shape
    targets = np.asarray(targets)
    keep = targets != pad_id
    n_tokens = int(keep.sum())
    if n_tokens == 0:
        raise ContractError("label_smoothed_loss: every target position is PAD")

    logp = T.log_softmax_rows(logits)
    onehot = np.zeros((batch, length, vocab), dtype=logits.dtype)
    safe_targets = np.where(keep, targets, 0)
    np.put_along_axis(onehot, safe_targets[:, :, None], 1.0, axis=2)
    nll = -(logp * Tensor(onehot)).sum(axis=-1)
    token_loss = nll * (1.0 - smoothing)
    if smoothing > 0.0:
        token_loss = token_loss + (-logp).mean(axis=-1) * smoothing
    keep_t = Tensor(keep.astype(logits.dtype))
    return (token_loss * keep_t).sum() / float(n_tokens)
