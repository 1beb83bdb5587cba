"""Dual-branch consistency training.

Each step teacher-forces both visual branches through the shared
translation trunk, combines the two smoothed translation losses with a
cross-branch distribution-consistency penalty, and backpropagates the
weighted total once. All stochasticity is derived from (seed, epoch,
batch index), so any run or resumed run replays bit-exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .batching import DualBranchBatch, EncodedPair, TokenBatcher
from .beam import beam_search
from .bleu import corpus_bleu
from .checkpoint import aligned_optim_state, load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .dualbranch import DualBranchModel
from .errors import ContractError, NumericError
from .nn import label_smoothed_loss
from .optim import Adam
from .tensor import Tensor
from .vocabulary import PAD_ID, Vocabulary, detokenize

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    """Weights of the combined objective and the consistency flavor."""

    translation: float = 1.0     # mu: weight of both branch NLL terms
    consistency: float = 1.0     # lambda: weight of the divergence term
    mode: str = "kl"

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "LossWeights":
        return cls(cfg.mu, cfg.lam, cfg.consistency_mode)


def branch_nll(logits: Tensor, targets: np.ndarray,
               smoothing: float = 0.1) -> Tensor:
    """Label-smoothed token-mean translation loss for one branch."""
    return label_smoothed_loss(logits, targets, PAD_ID, smoothing)


def consistency_loss(dist_recon: Tensor, dist_auth: Tensor, mode: str = "kl",
                     keep: Optional[np.ndarray] = None) -> Tensor:
    """Token-mean divergence between the branches' output distributions.

    Inputs are post-softmax distributions over the vocabulary, shaped
    [..., V]; `keep` masks the token positions that participate (PAD
    positions excluded). KL runs in the reconstructed-relative-to-authentic
    direction. Zero probabilities are floored at 1e-12 before the log;
    `consistency_loss.last_floor_count` records how many entries the floor
    touched on the most recent call.
    """
    if dist_recon.shape != dist_auth.shape:
        raise ContractError(
            f"branch distributions differ in shape: {dist_recon.shape} vs "
            f"{dist_auth.shape}")
    floored = int((dist_recon.data < PROB_FLOOR).sum()
                  + (dist_auth.data < PROB_FLOOR).sum())
    consistency_loss.last_floor_count = floored

    def _floor(p: Tensor) -> Tensor:
        return T.masked_fill(p, p.data < PROB_FLOOR, PROB_FLOOR)

    if mode == "kl":
        token_div = _kl_rows(dist_recon, _floor(dist_recon), _floor(dist_auth))
    elif mode == "js":
        mid = (dist_recon + dist_auth) * 0.5
        mid_f = _floor(mid)
        token_div = (_kl_rows(dist_recon, _floor(dist_recon), mid_f)
                     + _kl_rows(dist_auth, _floor(dist_auth), mid_f)) * 0.5
    elif mode == "cosine":
        inner = (dist_recon * dist_auth).sum(axis=-1)
        norm_r = (dist_recon * dist_recon).sum(axis=-1) ** 0.5
        norm_a = (dist_auth * dist_auth).sum(axis=-1) ** 0.5
        token_div = 1.0 - inner / (norm_r * norm_a)
    else:
        raise ContractError(f"unknown consistency mode {mode!r}")

    if keep is None:
        return token_div.mean()
    keep = np.asarray(keep, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise ContractError("consistency loss: no unmasked token positions")
    keep_t = Tensor(keep.astype(token_div.data.dtype))
    return (token_div * keep_t).sum() / float(count)


consistency_loss.last_floor_count = 0


def _kl_rows(weight: Tensor, p_floored: Tensor, q_floored: Tensor) -> Tensor:
    """Per-row sum of weight * (log p - log q) over the vocabulary axis."""
    return (weight * (T.log(p_floored) - T.log(q_floored))).sum(axis=-1)


@dataclass
class StepRecord:
    step: int
    recon_loss: float        # reconstructed-branch translation loss
    auth_loss: float         # authentic-branch translation loss
    consistency: float       # divergence between branch distributions
    total: float


@dataclass
class TrainReport:
    steps: List[StepRecord] = field(default_factory=list)
    validation: List[Tuple[int, float]] = field(default_factory=list)
    wall_seconds: float = 0.0

    def write(self, path) -> None:
        lines = ["step\trecon_loss\tauth_loss\tconsistency\ttotal"]
        lines += [f"{r.step}\t{r.recon_loss!r}\t{r.auth_loss!r}"
                  f"\t{r.consistency!r}\t{r.total!r}" for r in self.steps]
        if self.validation:
            lines.append("# validation: step\tbleu")
            lines += [f"# {step}\t{bleu!r}" for step, bleu in self.validation]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class Trainer:
    def __init__(self, model: DualBranchModel, train_cfg: TrainConfig,
                 batcher: TokenBatcher,
                 validation: Optional[Sequence] = None,
                 vocab: Optional[Vocabulary] = None,
                 checkpoint_dir=None):
        train_cfg.validate()
        self.model = model
        self.cfg = train_cfg
        self.batcher = batcher
        self.validation = validation or []
        self.vocab = vocab
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.weights = LossWeights.from_config(train_cfg)
        self.optimizer = Adam(model.parameters(), lr=train_cfg.lr,
                              beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                              eps=train_cfg.adam_eps,
                              warmup=train_cfg.warmup_steps,
                              decay=train_cfg.lr_decay,
                              accum_steps=train_cfg.accum_steps)
        self.report = TrainReport()
        self.start_epoch = 0
        self._micro_step = 0

    # -- loss assembly ----------------------------------------------------------

    def batch_losses(self, batch: DualBranchBatch, training: bool,
                     rng=None) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        """Returns (recon NLL, auth NLL, consistency, weighted total)."""
        logits_r = self.model.branch_logits(
            "recon", batch.src, batch.src_pad, batch.reconstructed,
            batch.tgt_in, training, rng)
        logits_a = self.model.branch_logits(
            "auth", batch.src, batch.src_pad, batch.authentic,
            batch.tgt_in, training, rng)
        smoothing = self.cfg.label_smoothing
        loss_r = branch_nll(logits_r, batch.tgt_out, smoothing)
        loss_a = branch_nll(logits_a, batch.tgt_out, smoothing)
        keep = batch.tgt_out != PAD_ID
        dist_r = T.softmax_rows(logits_r)
        dist_a = T.softmax_rows(logits_a)
        if self.cfg.stop_grad_authentic:
            dist_a = dist_a.detach()
        if self.weights.consistency > 0:
            div = consistency_loss(dist_r, dist_a, self.weights.mode, keep)
        else:  # still reported, but kept out of the gradient graph
            div = consistency_loss(dist_r.detach(), dist_a.detach(),
                                   self.weights.mode, keep)
        total = (loss_r + loss_a) * self.weights.translation \
            + div * self.weights.consistency
        return loss_r, loss_a, div, total

    # -- training ----------------------------------------------------------------

    def _step_rng(self, epoch: int, index: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(
            [self.cfg.seed & 0x7FFFFFFF, epoch, index]))

    def train(self) -> TrainReport:
        started = time.time()
        for epoch in range(self.start_epoch, self.cfg.epochs):
            self._run_epoch(epoch)
            if self.checkpoint_dir is not None:
                self.save(self.checkpoint_dir / f"epoch_{epoch:04d}.ckpt",
                          epoch)
        self.report.wall_seconds = time.time() - started
        return self.report

    def _run_epoch(self, epoch: int) -> None:
        for index, batch in enumerate(self.batcher.batches(epoch)):
            rng = self._step_rng(epoch, index)
            loss_r, loss_a, div, total = self.batch_losses(batch, True, rng)
            if not np.isfinite(total.data):
                raise NumericError(
                    f"divergence guard: non-finite loss at epoch {epoch} "
                    f"batch {index}")
            total.backward()
            self.optimizer.micro_step()
            self._micro_step += 1
            self.report.steps.append(StepRecord(
                self._micro_step, float(loss_r.data), float(loss_a.data),
                float(div.data), float(total.data)))
            if (self.cfg.validate_every
                    and self._micro_step % self.cfg.validate_every == 0):
                self.report.validation.append(
                    (self._micro_step, self.validation_bleu()))

    # -- evaluation ----------------------------------------------------------------

    def validation_bleu(self, beam_size: Optional[int] = None) -> float:
        if not self.validation or self.vocab is None:
            return float("nan")
        beam = beam_size or self.cfg.beam_size
        hyps, refs = [], []
        for pair, features in self.validation:
            hyp = beam_search(self.model, pair.src_ids, features,
                              beam_size=beam)
            hyps.append(detokenize(self.vocab.decode(hyp.tokens)))
            refs.append(detokenize(self.vocab.decode(pair.tgt_ids)))
        return corpus_bleu(hyps, refs, smoothing="add_one").bleu

    # -- persistence -----------------------------------------------------------------

    def save(self, path, epoch: int) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, self.model.state_dict(), self.model.cfg,
                        optim_state=self.optimizer.state_dict(),
                        meta={"epoch": epoch, "micro_step": self._micro_step})

    def resume(self, path) -> None:
        data = load_checkpoint(path)
        self.model.load_state_dict(data.params)
        names = [n for n, _ in self.model.named_parameters()]
        self.optimizer.load_state_dict(aligned_optim_state(data, names))
        self.start_epoch = int(data.meta["epoch"]) + 1
        self._micro_step = int(data.meta["micro_step"])


def mean_branch_divergence(model: DualBranchModel, batches,
                           mode: str = "kl") -> float:
    """Held-out mean per-token divergence between branch distributions."""
    values, counts = [], []
    for batch in batches:
        logits_r = model.branch_logits("recon", batch.src, batch.src_pad,
                                       batch.reconstructed, batch.tgt_in)
        logits_a = model.branch_logits("auth", batch.src, batch.src_pad,
                                       batch.authentic, batch.tgt_in)
        keep = batch.tgt_out != PAD_ID
        div = consistency_loss(T.softmax_rows(logits_r).detach(),
                               T.softmax_rows(logits_a).detach(), mode, keep)
        values.append(float(div.data))
        counts.append(int(keep.sum()))
    total = sum(counts)
    return sum(v * c for v, c in zip(values, counts)) / total
