"""Beam-search decoding with length-normalized final selection.

The search core walks any scoring callback (batched prefixes -> next-token
log-probabilities), which lets oracles drive it with hand-set logits; the
model wrapper encodes one sentence and decodes against its memory. Live
hypotheses compete on cumulative log-probability; finished ones on
log-probability per generated token. All ties break on token id, so two
runs produce identical output. Hitting the length limit force-finishes a
hypothesis with EOS and flags it truncated (the forced EOS is neither
scored nor counted).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from .dualbranch import DualBranchModel
from .errors import ContractError
from .tensor import Tensor
from .vocabulary import BOS_ID, EOS_ID


@dataclass
class BeamHypothesis:
    tokens: Tuple[int, ...]      # generated ids, EOS-terminated when natural
    log_prob: float              # sum over scored (non-forced) tokens
    finished: bool = False
    truncated: bool = False

    @property
    def scored_length(self) -> int:
        return len(self.tokens) - (1 if self.truncated else 0)

    @property
    def normalized_score(self) -> float:
        return self.log_prob / max(self.scored_length, 1)


def _better(a: BeamHypothesis, b: Optional[BeamHypothesis]) -> bool:
    if b is None:
        return True
    if a.normalized_score != b.normalized_score:
        return a.normalized_score > b.normalized_score
    return a.tokens < b.tokens


StepFn = Callable[[np.ndarray], np.ndarray]


def beam_search_steps(step_fn: StepFn, beam_size: int, max_len: int,
                      bos_id: int = BOS_ID,
                      eos_id: int = EOS_ID) -> BeamHypothesis:
    """Run the beam over a scoring callback.

    `step_fn` maps BOS-prefixed id rows [B, L] to log-probability rows
    [B, V] for the next token.
    """
    if beam_size < 1:
        raise ContractError(f"beam size must be >= 1, got {beam_size}")
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")

    live: List[BeamHypothesis] = [BeamHypothesis((), 0.0)]
    best_finished: Optional[BeamHypothesis] = None

    for _ in range(max_len):
        width = 1 + max(len(h.tokens) for h in live)
        prefixes = np.full((len(live), width), bos_id, dtype=np.int64)
        for i, hyp in enumerate(live):
            prefixes[i, 1:1 + len(hyp.tokens)] = hyp.tokens
        logprobs = np.asarray(step_fn(prefixes))

        candidates = []
        for i, hyp in enumerate(live):
            top = np.argsort(-logprobs[i], kind="stable")[:beam_size]
            for token in top:
                candidates.append((hyp.log_prob + float(logprobs[i, token]),
                                   int(token), i))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

        next_live = []
        for score, token, origin in candidates:
            hyp = BeamHypothesis(live[origin].tokens + (token,), score,
                                 finished=token == eos_id)
            if hyp.finished:
                if _better(hyp, best_finished):
                    best_finished = hyp
            elif len(next_live) < beam_size:
                next_live.append(hyp)
        live = next_live
        if not live:
            break

    for hyp in live:
        forced = BeamHypothesis(hyp.tokens + (eos_id,), hyp.log_prob,
                                finished=True, truncated=True)
        if _better(forced, best_finished):
            best_finished = forced
    if best_finished is None:
        raise ContractError("beam search produced no finished hypothesis")
    return best_finished


def model_step_fn(model: DualBranchModel, src_ids: np.ndarray,
                  features: np.ndarray, branch: str = "recon") -> StepFn:
    """Encode one sentence and return its next-token scoring callback."""
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    src_pad = np.zeros_like(src, dtype=bool)
    feats = np.asarray(features, dtype=np.float32)[None]
    memory, mem_mask = model.encode_branch(branch, src, src_pad, feats)

    def step(prefixes: np.ndarray) -> np.ndarray:
        rows = prefixes.shape[0]
        tiled_memory = Tensor(np.repeat(memory.data, rows, axis=0))
        tiled_mask = np.repeat(mem_mask, rows, axis=0)
        return model.transformer.decode_logprobs(tiled_memory, tiled_mask,
                                                 prefixes).data

    return step


def beam_search(model: DualBranchModel, src_ids: np.ndarray,
                features: np.ndarray, beam_size: int = 5,
                max_len: Optional[int] = None,
                branch: str = "recon") -> BeamHypothesis:
    """Decode one sentence; `features` is the [K, D] visual input."""
    limit = model.cfg.max_len - 1
    max_len = limit if max_len is None else min(max_len, limit)
    return beam_search_steps(model_step_fn(model, src_ids, features, branch),
                             beam_size, max_len)


def greedy_decode(model: DualBranchModel, src_ids: np.ndarray,
                  features: np.ndarray, max_len: Optional[int] = None,
                  branch: str = "recon") -> BeamHypothesis:
    return beam_search(model, src_ids, features, beam_size=1,
                       max_len=max_len, branch=branch)
