"""Dual-branch prompt machinery.

A visual prompt generator (two parallel convolutional branches over the
feature plane) produces a prompt the same shape as its input; a coupling
map projects it into the language width; cross-modal attention turns the
projected prompt into one text-prompt vector per source token; and branch
fusion injects both prompts into the joint sequence consumed by the
multimodal encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, ContractError
from .nn import Conv2d, FeedForward, Linear, Module, glorot_uniform
from .tensor import Parameter, Tensor


@dataclass
class PromptSet:
    """Prompts derived from one branch's visual features."""

    visual_prompt: Tensor        # [B, K, D] same plane as the features
    coupled_prompt: Tensor       # [B, K, d] projected into language width
    text_prompt: Tensor          # [B, N, d] one vector per source token


class VPGBlock(Module):
    """Visual prompt generation over a [B, L, D] feature plane.

    The plane is lifted to `channels` channels by a 1x1 convolution and
    split in half. The global half runs 1x1 -> 5x5 depthwise -> 1x1 with a
    residual connection and a linear map; the local half runs 3x3 -> 4x4 ->
    fully-connected bottleneck -> 3x3. Halves are concatenated and reduced
    back to a single channel, so the output matches the input shape. Every
    convolution is followed by ReLU.
    """

    MIN_EXTENT = 5

    def __init__(self, length: int, dim: int, channels: int,
                 bottleneck: int, rng: np.random.Generator,
                 global_enabled: bool = True, local_enabled: bool = True,
                 dtype=T.DEFAULT_DTYPE):
        if length < self.MIN_EXTENT or dim < self.MIN_EXTENT:
            raise ConfigError(
                f"visual prompt block needs spatial extents >= {self.MIN_EXTENT}, "
                f"got {length}x{dim}")
        if channels % 2:
            raise ConfigError(f"channel width must be even, got {channels}")
        half = channels // 2
        squeeze = max(half // 2, 1)
        self.length = length
        self.dim = dim
        self.channels = channels
        self.global_enabled = global_enabled
        self.local_enabled = local_enabled

        self.expand = Conv2d(1, channels, 1, rng, dtype=dtype)
        # global context path: compress channels, widen the receptive field
        # depthwise, restore channels for the residual sum
        self.g_compress = Conv2d(half, squeeze, 1, rng, dtype=dtype)
        self.g_depthwise = Conv2d(squeeze, squeeze, 5, rng, padding=2,
                                  groups=squeeze, dtype=dtype)
        self.g_restore = Conv2d(squeeze, half, 1, rng, dtype=dtype)
        self.g_linear = Linear(dim, dim, rng, dtype=dtype)
        # local detail path; the even 4x4 kernel uses asymmetric padding so
        # spatial extents survive, and the bottleneck realizes the
        # fully-connected stage at a tractable size
        self.l_conv_a = Conv2d(half, half, 3, rng, padding=1, dtype=dtype)
        self.l_conv_b = Conv2d(half, half, 4, rng, padding=((1, 2), (1, 2)),
                               dtype=dtype)
        flat = half * length * dim
        self.l_fc_down = Linear(flat, bottleneck, rng, dtype=dtype)
        self.l_fc_up = Linear(bottleneck, flat, rng, dtype=dtype)
        self.l_conv_c = Conv2d(half, half, 3, rng, padding=1, dtype=dtype)
        self.reduce = Conv2d(channels, 1, 1, rng, dtype=dtype)

    def _global_half(self, x1: Tensor) -> Tensor:
        if self.global_enabled:
            g = T.relu(self.g_compress(x1))
            g = T.relu(self.g_depthwise(g))
            g = T.relu(self.g_restore(g))
            x1 = g + x1
        return self.g_linear(x1)

    def _local_half(self, x2: Tensor) -> Tensor:
        if not self.local_enabled:
            return x2
        batch = x2.shape[0]
        h = T.relu(self.l_conv_a(x2))
        h = T.relu(self.l_conv_b(h))
        flat = h.reshape(batch, -1)
        flat = self.l_fc_up(T.relu(self.l_fc_down(flat)))
        h = flat.reshape(*x2.shape)
        return T.relu(self.l_conv_c(h))

    def __call__(self, features: Tensor) -> Tensor:
        if features.ndim != 3:
            raise ContractError(
                f"visual prompt input must be [B, L, D], got {features.shape}")
        batch, length, dim = features.shape
        if length < self.MIN_EXTENT or dim < self.MIN_EXTENT:
            raise ConfigError(
                f"visual prompt needs extents >= {self.MIN_EXTENT}, got "
                f"{length}x{dim}")
        x = T.relu(self.expand(features.reshape(batch, 1, length, dim)))
        half = self.channels // 2
        x1, x2 = x[:, :half], x[:, half:]
        fused = T.concat([self._global_half(x1), self._local_half(x2)], axis=1)
        out = T.relu(self.reduce(fused))
        return out.reshape(batch, length, dim)


class CouplingFunction(Module):
    """Projects visual prompts into the language width.

    linear mode is an affine map; conv1d mode first runs a width-3
    depthwise convolution along the prompt sequence, then the same affine
    map. Disabled mode passes through with zero-padding or truncation to
    the target width.
    """

    def __init__(self, d_visual: int, d_language: int, mode: str,
                 rng: np.random.Generator, enabled: bool = True,
                 dtype=T.DEFAULT_DTYPE):
        if mode not in ("linear", "conv1d"):
            raise ConfigError(f"unknown coupling mode {mode!r}")
        self.d_visual = d_visual
        self.d_language = d_language
        self.mode = mode
        self.enabled = enabled
        self.proj = Linear(d_visual, d_language, rng, dtype=dtype)
        if mode == "conv1d":
            self.seq_conv = Conv2d(d_visual, d_visual, (3, 1), rng,
                                   padding=((1, 1), (0, 0)), groups=d_visual,
                                   dtype=dtype)

    def __call__(self, visual_prompt: Tensor) -> Tensor:
        if visual_prompt.shape[-1] != self.d_visual:
            raise ConfigError(
                f"coupling expects width {self.d_visual}, got "
                f"{visual_prompt.shape[-1]}")
        if not self.enabled:
            return self._identity_pad(visual_prompt)
        x = visual_prompt
        if self.mode == "conv1d":
            batch, k, d = x.shape
            planes = x.transpose(0, 2, 1).reshape(batch, d, k, 1)
            x = self.seq_conv(planes).reshape(batch, d, k).transpose(0, 2, 1)
        return self.proj(x)

    def _identity_pad(self, x: Tensor) -> Tensor:
        d_in, d_out = self.d_visual, self.d_language
        if d_in == d_out:
            return x
        if d_in > d_out:
            return x[..., :d_out]
        pad = Tensor(np.zeros((*x.shape[:-1], d_out - d_in), dtype=x.dtype))
        return T.concat([x, pad], axis=-1)


class LanguagePromptAttention(Module):
    """Cross-modal attention producing one text-prompt vector per token.

    Queries come from the text embeddings, keys and values from the
    projected visual prompt; weights are softmax-normalized similarities.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        self.wq = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.wk = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.wv = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.dim = dim
        self.last_weights: Optional[np.ndarray] = None

    def __call__(self, text: Tensor, coupled_prompt: Tensor) -> Tensor:
        if coupled_prompt.shape[-2] == 0:
            raise ContractError("language prompt attention needs a non-empty prompt")
        q = self.wq(text)
        k = self.wk(coupled_prompt)
        v = self.wv(coupled_prompt)
        scores = T.matmul(q, k.transpose(0, 2, 1)) * (1.0 / np.sqrt(self.dim))
        weights = T.softmax_rows(scores)
        self.last_weights = weights.data
        return T.matmul(weights, v)


class BranchFusion(Module):
    """Builds the joint encoder input from features, prompts and text.

    The visual side concatenates features with their prompt and adapts the
    width via a feed-forward network, then adds the scaled value-projected
    coupled prompt; the text side adds the scaled per-token text prompt.
    """

    def __init__(self, d_visual: int, d_model: int, rng: np.random.Generator,
                 share_value_proj: bool = False, dtype=T.DEFAULT_DTYPE):
        self.adapter = FeedForward(2 * d_visual, d_model, d_model, rng, dtype=dtype)
        self.value_proj_recon = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.value_proj_auth = (self.value_proj_recon if share_value_proj
                                else Linear(d_model, d_model, rng, bias=False,
                                            dtype=dtype))

    def value_proj(self, branch: str) -> Linear:
        if branch == "recon":
            return self.value_proj_recon
        if branch == "auth":
            return self.value_proj_auth
        raise ContractError(f"unknown branch {branch!r}")

    def __call__(self, branch: str, features: Tensor, prompts: PromptSet,
                 text: Tensor, alpha: float) -> Tuple[Tensor, Tensor]:
        if alpha < 0:
            raise ConfigError(f"fusion scale must be >= 0, got {alpha}")
        fused = self.adapter(T.concat([features, prompts.visual_prompt], axis=-1))
        if alpha > 0:
            injected = self.value_proj(branch)(prompts.coupled_prompt)
            fused = fused + injected * alpha
            text = text + prompts.text_prompt * alpha
        return text, fused


class PromptPipeline(Module):
    """End-to-end prompt path for one model: stages, coupling, fusion.

    With `prompt_stages` == 1 features are consumed as delivered; larger
    stage counts run a small learned visual encoder whose feature map is
    enhanced by each stage's prompt before the next stage.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 dtype=T.DEFAULT_DTYPE):
        cfg.validate()
        self.cfg = cfg
        k, d_feat, d_model = cfg.feature_count, cfg.feature_dim, cfg.model_dim
        stages = max(1, cfg.prompt_stages)
        self.vpg_stages = [
            VPGBlock(k, d_feat, cfg.prompt_channels, cfg.fc_bottleneck, rng,
                     global_enabled=cfg.vpg_global, local_enabled=cfg.vpg_local,
                     dtype=dtype)
            for _ in range(stages)]
        self.stage_proj = ([Linear(d_feat, d_feat, rng, dtype=dtype)
                            for _ in range(stages)] if stages > 1 else [])
        self.coupling = CouplingFunction(d_feat, d_model, cfg.coupling_mode, rng,
                                         enabled=cfg.coupling_enabled, dtype=dtype)
        self.prompt_attn = LanguagePromptAttention(d_model, rng, dtype=dtype)
        self.fusion = BranchFusion(d_feat, d_model, rng,
                                   share_value_proj=cfg.share_branch_value_proj,
                                   dtype=dtype)
        if cfg.independent_prompts:
            self.free_prompt = Parameter(glorot_uniform(
                rng, 4, d_model, (4, d_model), dtype))

    def visual_prompt(self, features: Tensor) -> Tuple[Tensor, Tensor]:
        """Returns (possibly stage-refined features, final visual prompt)."""
        if not self.stage_proj:
            return features, self.vpg_stages[0](features)
        h = features
        prompt = None
        for proj, vpg in zip(self.stage_proj, self.vpg_stages):
            h = T.relu(proj(h))
            prompt = vpg(h)
            h = h + prompt
        return h, prompt

    def build(self, branch: str, features: Tensor, text: Tensor) -> Tuple[Tensor, Tensor, PromptSet]:
        """Produce (conditioned text, fused visual states, prompt set)."""
        batch = features.shape[0]
        if self.cfg.independent_prompts:
            # free-form text prompts with no visual conditioning
            zero_plane = Tensor(np.zeros(features.shape, dtype=features.data.dtype))
            coupled = Tensor(np.zeros(
                (batch, features.shape[1], self.cfg.model_dim),
                dtype=features.data.dtype))
            bank = T.concat([self.free_prompt.reshape(1, *self.free_prompt.shape)
                             for _ in range(batch)], axis=0)
            text_prompt = self.prompt_attn(text, bank)
            prompts = PromptSet(zero_plane, coupled, text_prompt)
            visual_in = features
        else:
            visual_in, vp = self.visual_prompt(features)
            coupled = self.coupling(vp)
            text_prompt = self.prompt_attn(text, coupled)
            prompts = PromptSet(vp, coupled, text_prompt)
        text_hat, fused = self.fusion(branch, visual_in, prompts, text,
                                      self.cfg.prompt_alpha)
        return text_hat, fused, prompts
