"""Synthetic desk-scale translation task and experiment harness.

The toy language has a small closed vocabulary of two-letter words; the
"translation" applies a fixed word permutation, so a correct system learns
an exact token mapping. Visual features for the reconstructed branch come
from the diffusion provider; the authentic branch uses a correlated
surrogate (reconstructed features plus small seeded noise), mirroring the
two-branch training setup without real images.
"""

from __future__ import annotations

import itertools
import string
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .batching import (EncodedPair, StoredFeatures, TokenBatcher,
                       encode_corpus)
from .beam import beam_search
from .bleu import corpus_bleu
from .bpe import BPEModel
from .config import DiffusionConfig, ModelConfig, TrainConfig
from .diffusion import FeatureProvider
from .dualbranch import DualBranchModel
from .train import TrainReport, Trainer
from .vocabulary import Vocabulary, detokenize


def toy_word_list(count: int = 20) -> List[str]:
    letters = string.ascii_lowercase[:6]
    words = ["".join(pair) for pair in itertools.product(letters, repeat=2)]
    return words[:count]


@dataclass
class ToyCorpus:
    src_train: List[str]
    tgt_train: List[str]
    src_test: List[str]
    tgt_test: List[str]
    mapping: Dict[str, str]


def build_toy_corpus(vocab_words: int = 20, train_pairs: int = 2000,
                     test_pairs: int = 200, min_len: int = 3,
                     max_len: int = 8, seed: int = 47,
                     ambiguous_words: int = 0) -> ToyCorpus:
    """Deterministic token-mapping corpus with disjoint train/test draws.

    `ambiguous_words` source words translate to one of two targets chosen
    at random per occurrence; their gold conditional distribution stays
    soft, which keeps cross-branch divergences measurable after training.
    """
    words = toy_word_list(vocab_words)
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, 11]))
    shuffled = list(words)
    rng.shuffle(shuffled)
    mapping = dict(zip(words, shuffled))
    alternates = {w: shuffled[(i + 1) % len(shuffled)]
                  for i, w in enumerate(words[:ambiguous_words])}

    def translate(word):
        alt = alternates.get(word)
        if alt is not None and rng.random() < 0.5:
            return alt
        return mapping[word]

    def sample(n):
        src, tgt = [], []
        for _ in range(n):
            length = int(rng.integers(min_len, max_len + 1))
            picks = [words[int(i)] for i in rng.integers(0, len(words), length)]
            src.append(" ".join(picks))
            tgt.append(" ".join(translate(w) for w in picks))
        return src, tgt

    src_train, tgt_train = sample(train_pairs)
    src_test, tgt_test = sample(test_pairs)
    return ToyCorpus(src_train, tgt_train, src_test, tgt_test, mapping)


def toy_model_overrides() -> dict:
    """Desk-scale architecture that trains to convergence in minutes."""
    return dict(enc_layers=2, dec_layers=2, model_dim=32, ffn_dim=64,
                heads=4, dropout=0.1, max_len=32, feature_count=8,
                feature_dim=16, prompt_channels=4, fc_bottleneck=32)


def toy_train_overrides() -> dict:
    return dict(epochs=12, batch_tokens=512, lr=3e-3, warmup_steps=100,
                accum_steps=1, validate_every=0)


def toy_diffusion_config() -> DiffusionConfig:
    return DiffusionConfig(diffusion_steps=12, condition_dim=16,
                           predictor_hidden=32)


def materialize_features(pairs: Sequence[EncodedPair],
                         provider: FeatureProvider,
                         mode: str) -> Dict[int, np.ndarray]:
    """Precompute one feature matrix per sentence (providers are pure)."""
    return {p.sentence_id: provider.provide(p.src_ids, mode,
                                            sentence_key=p.sentence_id)
            for p in pairs}


def authentic_surrogate(reconstructed: Dict[int, np.ndarray], seed: int,
                        noise_scale: float = 0.3) -> Dict[int, np.ndarray]:
    """Correlated stand-in for real-image features: shared signal + noise."""
    out = {}
    for sid, matrix in reconstructed.items():
        rng = np.random.default_rng(
            np.random.SeedSequence([seed & 0x7FFFFFFF, 977, sid]))
        out[sid] = (matrix + noise_scale
                    * rng.standard_normal(matrix.shape)).astype(np.float32)
    return out


@dataclass
class ToyExperiment:
    model: DualBranchModel
    trainer: Trainer
    report: TrainReport
    bpe: BPEModel
    vocab: Vocabulary
    test_pairs: List[EncodedPair]
    test_recon: Dict[int, np.ndarray]
    test_auth: Dict[int, np.ndarray]
    corpus: ToyCorpus


def prepare_toy_experiment(model_overrides: Optional[dict] = None,
                           train_overrides: Optional[dict] = None,
                           corpus: Optional[ToyCorpus] = None,
                           seed: int = 47,
                           checkpoint_dir=None,
                           surrogate_noise: float = 0.3) -> ToyExperiment:
    corpus = corpus or build_toy_corpus(seed=seed)
    model_kw = toy_model_overrides()
    model_kw.update(model_overrides or {})
    train_kw = toy_train_overrides()
    train_kw.update(train_overrides or {})
    train_kw["seed"] = seed

    bpe = BPEModel.learn(corpus.src_train + corpus.tgt_train, 64)
    token_lines = [bpe.segment_line(line)
                   for line in corpus.src_train + corpus.tgt_train]
    vocab = Vocabulary.from_corpus(token_lines)
    model_cfg = ModelConfig(vocab_size=len(vocab), **model_kw)
    train_cfg = TrainConfig(**train_kw)

    train_pairs = encode_corpus(corpus.src_train, corpus.tgt_train, bpe, vocab)
    offset = len(train_pairs)
    test_pairs = encode_corpus(corpus.src_test, corpus.tgt_test, bpe, vocab)
    for pair in test_pairs:  # keep ids distinct from the training sentences
        pair.sentence_id += offset

    provider = FeatureProvider(model_cfg.feature_count, model_cfg.feature_dim,
                               cfg=toy_diffusion_config(), seed=seed)
    recon_train = materialize_features(train_pairs, provider, "reconstructed")
    auth_train = authentic_surrogate(recon_train, seed, surrogate_noise)
    recon_test = materialize_features(test_pairs, provider, "reconstructed")
    auth_test = authentic_surrogate(recon_test, seed, surrogate_noise)

    batcher = TokenBatcher(train_pairs, StoredFeatures(auth_train),
                           StoredFeatures(recon_train),
                           budget=train_cfg.batch_tokens, seed=seed)
    model = DualBranchModel(model_cfg, np.random.default_rng(seed))
    trainer = Trainer(model, train_cfg, batcher,
                      validation=[(p, recon_test[p.sentence_id])
                                  for p in test_pairs[:20]],
                      vocab=vocab, checkpoint_dir=checkpoint_dir)
    return ToyExperiment(model, trainer, TrainReport(), bpe, vocab,
                         test_pairs, recon_test, auth_test, corpus)


def decode_corpus(model: DualBranchModel, pairs: Sequence[EncodedPair],
                  features: Dict[int, np.ndarray], vocab: Vocabulary,
                  beam_size: int = 5) -> List[str]:
    out = []
    for pair in pairs:
        hyp = beam_search(model, pair.src_ids, features[pair.sentence_id],
                          beam_size=beam_size)
        out.append(detokenize(vocab.decode(hyp.tokens)))
    return out


def evaluate_toy(experiment: ToyExperiment, beam_size: int = 5,
                 limit: Optional[int] = None) -> float:
    pairs = experiment.test_pairs[:limit] if limit else experiment.test_pairs
    hyps = decode_corpus(experiment.model, pairs, experiment.test_recon,
                         experiment.vocab, beam_size)
    refs = [detokenize(experiment.vocab.decode(p.tgt_ids)) for p in pairs]
    return corpus_bleu(hyps, refs).bleu


ABLATION_VARIANTS = {
    "full": {},
    "no_consistency": {"train": {"lam": 0.0}},
    "no_vpg_global": {"model": {"vpg_global": False}},
    "no_vpg_local": {"model": {"vpg_local": False}},
    "no_coupling": {"model": {"coupling_enabled": False}},
    "no_vpg": {"model": {"independent_prompts": True}},
    "no_prompt": {"model": {"prompt_alpha": 0.0}},
}


def run_ablation(variant: str, model_overrides: Optional[dict] = None,
                 train_overrides: Optional[dict] = None, seed: int = 47,
                 corpus: Optional[ToyCorpus] = None,
                 beam_size: int = 5) -> Tuple[float, ToyExperiment]:
    """Train one ablation variant end to end and return its test BLEU."""
    if variant not in ABLATION_VARIANTS:
        raise KeyError(f"unknown ablation variant {variant!r}")
    toggles = ABLATION_VARIANTS[variant]
    model_kw = dict(toggles.get("model", {}))
    model_kw.update(model_overrides or {})
    train_kw = dict(toggles.get("train", {}))
    train_kw.update(train_overrides or {})
    experiment = prepare_toy_experiment(model_kw, train_kw, corpus=corpus,
                                        seed=seed)
    experiment.trainer.train()
    bleu = evaluate_toy(experiment, beam_size=beam_size)
    return bleu, experiment
