"""Toy conditional diffusion over visual feature vectors.

Implements stepwise forward noising, the conditioned reverse recursion
exactly as specified (the re-noise term reuses the predicted noise; a
standard-posterior mode exists for comparison), the noise-prediction
training loss, and the deterministic feature providers used by training
and inference (reconstructed / noise / passthrough).
"""

from __future__ import annotations

import hashlib
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .config import DiffusionConfig
from .errors import ContractError, DataError
from .nn import Linear, Module, positional_encoding
from .tensor import Tensor

TIME_EMBED_DIM = 8


class NoiseSchedule:
    """Per-step retention coefficients alpha_t in (0, 1], t in [1, T].

    alpha_bar accumulates the product of retentions; index 0 is the
    virtual noiseless step (alpha_0 = 1), which zeroes the re-noise term
    on the final reverse step.
    """

    def __init__(self, steps: int = 50, alpha_start: float = 0.9999,
                 alpha_end: float = 0.98):
        if steps < 1:
            raise ContractError(f"schedule needs >= 1 step, got {steps}")
        for a in (alpha_start, alpha_end):
            if not 0.0 < a <= 1.0:
                raise ContractError(f"retention coefficient {a} outside (0, 1]")
        self.steps = steps
        self.alphas = np.concatenate(
            [[1.0], np.linspace(alpha_start, alpha_end, steps)])
        self.alpha_bars = np.cumprod(self.alphas)

    @classmethod
    def from_config(cls, cfg: DiffusionConfig) -> "NoiseSchedule":
        return cls(cfg.diffusion_steps, cfg.alpha_start, cfg.alpha_end)

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ContractError(f"time step {t} outside [1, {self.steps}]")

    def alpha(self, t: int) -> float:
        if not 0 <= t <= self.steps:
            raise ContractError(f"time step {t} outside [0, {self.steps}]")
        return float(self.alphas[t])

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.steps:
            raise ContractError(f"time step {t} outside [0, {self.steps}]")
        return float(self.alpha_bars[t])


def forward_step(v_prev: np.ndarray, t: int, schedule: NoiseSchedule,
                 noise: np.ndarray) -> np.ndarray:
    """One noising step: sqrt(a_t) * v + sqrt(1 - a_t) * noise."""
    schedule._check(t)
    a = schedule.alpha(t)
    return np.sqrt(a) * v_prev + np.sqrt(1.0 - a) * noise


def forward_marginal(v0: np.ndarray, t: int, schedule: NoiseSchedule,
                     noise: np.ndarray) -> np.ndarray:
    """Composed closed form: sqrt(abar_t) * v0 + sqrt(1 - abar_t) * noise."""
    schedule._check(t)
    abar = schedule.alpha_bar(t)
    return np.sqrt(abar) * v0 + np.sqrt(1.0 - abar) * noise


def invert_forward_step(v_t: np.ndarray, t: int, schedule: NoiseSchedule,
                        noise: np.ndarray) -> np.ndarray:
    """Algebraic inversion of one forward step given the exact noise."""
    schedule._check(t)
    a = schedule.alpha(t)
    return (v_t - np.sqrt(1.0 - a) * noise) / np.sqrt(a)


class OraclePredictor:
    """Returns the exact injected noise; used by inversion oracles."""

    def __init__(self, noise: Optional[np.ndarray] = None):
        self.noise = noise

    def set_noise(self, noise: np.ndarray) -> None:
        self.noise = noise

    def predict(self, v_t, t, condition):
        if self.noise is None:
            raise ContractError("oracle predictor has no stored noise")
        return self.noise


class ZeroPredictor:
    def predict(self, v_t, t, condition):
        return np.zeros_like(v_t)


class LearnedPredictor(Module):
    """Two-layer network over [noisy vector; time embedding; condition].

    `guidance` > 1 blends the conditional and unconditional predictions
    (classifier-free style) and applies only at generation time, never in
    the training loss.
    """

    def __init__(self, dim: int, cond_dim: int, hidden: int, steps: int,
                 rng: np.random.Generator, guidance: float = 7.5,
                 dtype=T.DEFAULT_DTYPE):
        self.dim = dim
        self.cond_dim = cond_dim
        self.guidance = guidance
        self.time_table = positional_encoding(steps + 1, TIME_EMBED_DIM, dtype)
        self.inner = Linear(dim + TIME_EMBED_DIM + cond_dim, hidden, rng, dtype=dtype)
        self.outer = Linear(hidden, dim, rng, dtype=dtype)

    def _features(self, v_t: np.ndarray, t: int, condition: np.ndarray) -> np.ndarray:
        v_t = np.atleast_2d(np.asarray(v_t))
        rows = v_t.shape[0]
        t_emb = np.tile(self.time_table[t], (rows, 1))
        cond = np.tile(np.asarray(condition, dtype=v_t.dtype), (rows, 1))
        return np.concatenate([v_t, t_emb, cond], axis=1)

    def predict_tensor(self, v_t: Tensor, t: int, condition: np.ndarray) -> Tensor:
        """Differentiable conditional prediction (no guidance)."""
        rows = 1 if v_t.ndim == 1 else v_t.shape[0]
        flat = v_t.reshape(rows, self.dim)
        t_emb = Tensor(np.tile(self.time_table[t], (rows, 1)))
        cond = Tensor(np.tile(np.asarray(condition, dtype=flat.data.dtype),
                              (rows, 1)))
        joined = T.concat([flat, t_emb, cond], axis=1)
        out = self.outer(T.relu(self.inner(joined)))
        return out.reshape(*v_t.shape)

    def _raw(self, feats: np.ndarray) -> np.ndarray:
        hidden = np.maximum(feats @ self.inner.W.data + self.inner.b.data, 0)
        return hidden @ self.outer.W.data + self.outer.b.data

    def predict(self, v_t: np.ndarray, t: int, condition: np.ndarray) -> np.ndarray:
        v_t = np.asarray(v_t)
        squeeze = v_t.ndim == 1
        cond_pred = self._raw(self._features(v_t, t, condition))
        if self.guidance != 1.0:
            uncond = self._raw(self._features(v_t, t, np.zeros(self.cond_dim)))
            cond_pred = uncond + self.guidance * (cond_pred - uncond)
        return cond_pred[0] if squeeze else cond_pred


def reverse_step(v_t: np.ndarray, t: int, predictor, condition,
                 schedule: NoiseSchedule, mode: str = "as_written",
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One denoising step.

    as_written: rescaled removal of the predicted noise plus a re-noise
    term sqrt(1 - alpha_{t-1}) that reuses the same prediction.
    ddpm: the standard posterior mean with fresh Gaussian noise (needs rng
    for t > 1), kept for comparison experiments.
    """
    schedule._check(t)
    eps_hat = predictor.predict(v_t, t, condition)
    a_t = schedule.alpha(t)
    if mode == "as_written":
        restored = (v_t - np.sqrt(1.0 - a_t) * eps_hat) / np.sqrt(a_t)
        return restored + np.sqrt(1.0 - schedule.alpha(t - 1)) * eps_hat
    if mode == "ddpm":
        abar_t, abar_prev = schedule.alpha_bar(t), schedule.alpha_bar(t - 1)
        beta_t = 1.0 - a_t
        mean = (v_t - beta_t / np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(a_t)
        if t == 1:
            return mean
        if rng is None:
            raise ContractError("ddpm mode needs an rng for fresh noise")
        sigma = np.sqrt((1.0 - abar_prev) / (1.0 - abar_t) * beta_t)
        return mean + sigma * rng.standard_normal(v_t.shape)
    raise ContractError(f"unknown reverse mode {mode!r}")


def ldm_loss(v0: np.ndarray, t: int, noise: np.ndarray, predictor,
             condition: np.ndarray, schedule: NoiseSchedule) -> Tensor:
    """Squared noise-prediction error on the composed forward marginal."""
    z_t = forward_marginal(np.asarray(v0), t, schedule, np.asarray(noise))
    if isinstance(predictor, LearnedPredictor):
        pred = predictor.predict_tensor(Tensor(z_t.astype(np.float32)
                                               if z_t.dtype == np.float32
                                               else z_t), t, condition)
    else:
        pred = Tensor(np.asarray(predictor.predict(z_t, t, condition)))
    diff = Tensor(np.asarray(noise, dtype=pred.data.dtype)) - pred
    return (diff * diff).sum()


def condition_vector(sentence_ids, dim: int) -> np.ndarray:
    """Deterministic embedding of a token-id sequence (bit-exact per input)."""
    digest = hashlib.sha256(
        b"cond:" + np.asarray(sentence_ids, dtype=np.int64).tobytes()).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    return rng.standard_normal(dim).astype(np.float32)


def _sentence_rng(seed: int, sentence_ids) -> np.random.Generator:
    ids = [int(x) for x in np.asarray(sentence_ids).reshape(-1)]
    return np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF] + ids))


class FeatureProvider:
    """Deterministic per-sentence visual features.

    reconstructed: runs the full reverse chain from seeded Gaussian noise,
    conditioned on the sentence embedding, one chain per feature row.
    noise: pure seeded Gaussian features (the degenerate-context baseline).
    passthrough: stored authentic features, keyed by sentence id.
    """

    MODES = ("reconstructed", "noise", "passthrough")

    def __init__(self, feature_count: int, feature_dim: int,
                 cfg: Optional[DiffusionConfig] = None, seed: int = 47,
                 authentic: Optional[Dict[int, np.ndarray]] = None,
                 predictor: Optional[LearnedPredictor] = None):
        self.cfg = cfg or DiffusionConfig()
        self.feature_count = feature_count
        self.feature_dim = feature_dim
        self.seed = seed
        self.schedule = NoiseSchedule.from_config(self.cfg)
        self.authentic = authentic if authentic is not None else {}
        if predictor is None:
            predictor = LearnedPredictor(
                feature_dim, self.cfg.condition_dim, self.cfg.predictor_hidden,
                self.cfg.diffusion_steps, np.random.default_rng(seed),
                guidance=self.cfg.guidance_scale)
        self.predictor = predictor

    def provide(self, sentence_ids, mode: str,
                sentence_key: Optional[int] = None) -> np.ndarray:
        if mode not in self.MODES:
            raise ContractError(f"unknown feature mode {mode!r}")
        if mode == "passthrough":
            if sentence_key is None or sentence_key not in self.authentic:
                raise DataError(
                    f"no stored authentic features for sentence {sentence_key}")
            return self.authentic[sentence_key]
        rng = _sentence_rng(self.seed, sentence_ids)
        shape = (self.feature_count, self.feature_dim)
        if mode == "noise":
            return rng.standard_normal(shape).astype(np.float32)
        condition = condition_vector(sentence_ids, self.cfg.condition_dim)
        v = rng.standard_normal(shape)
        for t in range(self.schedule.steps, 0, -1):
            v = reverse_step(v, t, self.predictor, condition, self.schedule)
        return v.astype(np.float32)
