"""Corpus encoding and token-budgeted dual-branch batching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .bpe import BPEModel
from .errors import DataError
from .vocabulary import BOS_ID, EOS_ID, PAD_ID, Vocabulary


@dataclass
class EncodedPair:
    """One aligned sentence pair: ids include the terminating EOS."""

    sentence_id: int
    src_ids: List[int]
    tgt_ids: List[int]

    @property
    def token_count(self) -> int:
        return len(self.src_ids) + len(self.tgt_ids)


@dataclass
class DualBranchBatch:
    """One training batch with both branches' visual features."""

    sentence_ids: np.ndarray      # [B]
    src: np.ndarray               # [B, N] PAD-padded, EOS-terminated
    src_pad: np.ndarray           # [B, N] bool, True where PAD
    tgt_in: np.ndarray            # [B, M] BOS-prefixed decoder input
    tgt_out: np.ndarray           # [B, M] gold ids, PAD where inactive
    authentic: np.ndarray         # [B, K, D] float32
    reconstructed: np.ndarray     # [B, K, D] float32
    token_count: int              # non-PAD source+target tokens

    @property
    def size(self) -> int:
        return self.src.shape[0]


def encode_corpus(src_lines: Sequence[str], tgt_lines: Sequence[str],
                  bpe: BPEModel, vocab: Vocabulary) -> List[EncodedPair]:
    if len(src_lines) != len(tgt_lines):
        raise DataError(
            f"corpus sides differ: {len(src_lines)} vs {len(tgt_lines)} lines")
    pairs = []
    for i, (src, tgt) in enumerate(zip(src_lines, tgt_lines)):
        src_ids = vocab.encode(bpe.segment_line(src)) + [EOS_ID]
        tgt_ids = vocab.encode(bpe.segment_line(tgt)) + [EOS_ID]
        pairs.append(EncodedPair(i, src_ids, tgt_ids))
    return pairs


class StoredFeatures:
    """Feature source backed by a sentence_id -> matrix mapping."""

    def __init__(self, matrices: Dict[int, np.ndarray]):
        self.matrices = matrices

    def get(self, pair: EncodedPair) -> np.ndarray:
        matrix = self.matrices.get(pair.sentence_id)
        if matrix is None:
            raise DataError(
                f"no feature record for sentence id {pair.sentence_id}")
        return np.asarray(matrix, dtype=np.float32)


class ProvidedFeatures:
    """Feature source that queries a provider with the token ids."""

    def __init__(self, provider, mode: str):
        self.provider = provider
        self.mode = mode

    def get(self, pair: EncodedPair) -> np.ndarray:
        return self.provider.provide(pair.src_ids, self.mode,
                                     sentence_key=pair.sentence_id)


def _pad_rows(rows: List[List[int]], width: int) -> np.ndarray:
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, row in enumerate(rows):
        out[i, :len(row)] = row
    return out


class TokenBatcher:
    """Length-sorted batches capped by a source+target token budget.

    Every sentence appears exactly once per epoch; the batch order is
    shuffled by (seed, epoch), so any epoch's stream is reproducible in
    isolation.
    """

    def __init__(self, pairs: Sequence[EncodedPair], authentic_source,
                 reconstructed_source, budget: int = 2048, seed: int = 47):
        if not pairs:
            raise DataError("no sentence pairs to batch")
        self.pairs = list(pairs)
        self.authentic_source = authentic_source
        self.reconstructed_source = reconstructed_source
        self.budget = budget
        self.seed = seed
        self._groups = self._plan()

    def _plan(self) -> List[List[EncodedPair]]:
        ordered = sorted(self.pairs,
                         key=lambda p: (p.token_count, p.sentence_id))
        groups: List[List[EncodedPair]] = []
        current: List[EncodedPair] = []
        used = 0
        for pair in ordered:
            if pair.token_count > self.budget:
                raise DataError(
                    f"sentence {pair.sentence_id} alone exceeds the token "
                    f"budget ({pair.token_count} > {self.budget})")
            if current and used + pair.token_count > self.budget:
                groups.append(current)
                current, used = [], 0
            current.append(pair)
            used += pair.token_count
        if current:
            groups.append(current)
        return groups

    def batch_count(self) -> int:
        return len(self._groups)

    def _materialize(self, group: List[EncodedPair]) -> DualBranchBatch:
        n = max(len(p.src_ids) for p in group)
        m = max(len(p.tgt_ids) for p in group)
        src = _pad_rows([p.src_ids for p in group], n)
        tgt_out = _pad_rows([p.tgt_ids for p in group], m)
        tgt_in = np.full_like(tgt_out, PAD_ID)
        tgt_in[:, 0] = BOS_ID
        tgt_in[:, 1:] = tgt_out[:, :-1]
        # slots whose target is PAD are inactive: keep their inputs PAD so
        # they are pad-masked as keys in decoder self-attention
        tgt_in[tgt_out == PAD_ID] = PAD_ID

        auth = np.stack([self.authentic_source.get(p) for p in group])
        recon = np.stack([self.reconstructed_source.get(p) for p in group])
        if auth.shape != recon.shape:
            raise DataError(
                f"branch feature shapes differ: {auth.shape} vs {recon.shape}")
        return DualBranchBatch(
            sentence_ids=np.array([p.sentence_id for p in group]),
            src=src, src_pad=src == PAD_ID,
            tgt_in=tgt_in, tgt_out=tgt_out,
            authentic=auth.astype(np.float32),
            reconstructed=recon.astype(np.float32),
            token_count=sum(p.token_count for p in group))

    def batches(self, epoch: int) -> List[DualBranchBatch]:
        order = np.random.default_rng(
            np.random.SeedSequence([self.seed & 0x7FFFFFFF, epoch])
        ).permutation(len(self._groups))
        return [self._materialize(self._groups[i]) for i in order]
