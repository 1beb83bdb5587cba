"""Command-line surface: tokenize, features, train, translate, score, ablate.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure. Every command that produces files also writes a manifest
recording the resolved configuration, seeds, and input checksums, so any
run can be reproduced from its outputs alone. Configuration precedence is
command-line flag > config file > built-in default; the environment
variable D2P_SEED overrides the built-in default seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as config_mod
from . import tensor as T
from .batching import ProvidedFeatures, StoredFeatures, TokenBatcher, encode_corpus
from .bleu import corpus_bleu
from .bpe import BPEModel
from .checkpoint import average_checkpoints, load_checkpoint, save_checkpoint
from .config import DEFAULT_SEED, build_configs, load_config_file
from .d2pf import read_d2pf, records_to_dict, validate_d2pf, write_d2pf
from .diffusion import FeatureProvider
from .dualbranch import DualBranchModel
from .errors import (ConfigError, ContractError, DataError, DualMMTError,
                     NumericError)
from .beam import beam_search
from .toytask import (ABLATION_VARIANTS, authentic_surrogate,
                      build_toy_corpus, materialize_features, run_ablation)
from .train import Trainer
from .vocabulary import EOS_ID, Vocabulary, detokenize


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def default_seed() -> int:
    raw = os.environ.get("D2P_SEED")
    if raw is None:
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"D2P_SEED must be an integer, got {raw!r}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, resolved: dict,
                   inputs: List) -> None:
    lines = [f"command = {command}"]
    lines += [f"{'lambda' if k == 'lam' else k} = {resolved[k]}"
              for k in sorted(resolved)]
    for item in inputs:
        item = Path(item)
        lines.append(f"input.{item.name}.sha256 = {_sha256(item)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _resolve_configs(args, flag_overrides: Optional[dict] = None):
    """flag > config file > built-in default; returns configs + flat dict."""
    resolved = config_mod.default_config()
    resolved["seed"] = default_seed()
    if getattr(args, "config", None):
        resolved.update(load_config_file(args.config))
    for key, value in (flag_overrides or {}).items():
        if value is not None:
            resolved[key] = value
    model_cfg, diff_cfg, train_cfg = build_configs(resolved)
    return model_cfg, diff_cfg, train_cfg, resolved


def _load_lines(path) -> List[str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    return path.read_text(encoding="utf-8").splitlines()


def _load_tokenizer(args):
    bpe = BPEModel.load(args.bpe)
    vocab = Vocabulary.load(args.vocab)
    return bpe, vocab


# -- commands -----------------------------------------------------------------

def cmd_bpe_learn(args) -> int:
    lines = []
    for path in args.input:
        lines.extend(_load_lines(path))
    bpe = BPEModel.learn(lines, args.merges)
    bpe.save(args.output)
    vocab = Vocabulary.from_corpus(bpe.segment_line(line) for line in lines)
    vocab.save(args.vocab)
    write_manifest(str(args.output) + ".manifest",
                   "bpe-learn", {"merges": args.merges}, args.input)
    print(f"learned {len(bpe.merges)} merges; vocabulary of {len(vocab)} "
          f"tokens ({args.vocab})")
    return 0


def cmd_bpe_apply(args) -> int:
    bpe = BPEModel.load(args.bpe)
    lines = _load_lines(args.input)
    out = "\n".join(" ".join(bpe.segment_line(line)) for line in lines)
    Path(args.output).write_text(out + "\n", encoding="utf-8")
    print(f"segmented {len(lines)} lines -> {args.output}")
    return 0


def cmd_features(args) -> int:
    if args.validate:
        info = validate_d2pf(args.validate)
        print(f"{args.validate}: OK  records={info['records']} "
              f"K={info['K']} D={info['D']} version={info['version']}")
        return 0
    model_cfg, diff_cfg, _, resolved = _resolve_configs(
        args, {"seed": args.seed})
    bpe, vocab = _load_tokenizer(args)
    lines = _load_lines(args.corpus)
    provider = FeatureProvider(model_cfg.feature_count, model_cfg.feature_dim,
                               cfg=diff_cfg, seed=resolved["seed"])
    matrices = {}
    for i, line in enumerate(lines):
        ids = vocab.encode(bpe.segment_line(line)) + [EOS_ID]
        matrices[i] = provider.provide(ids, args.mode, sentence_key=i)
    write_d2pf(args.output, matrices)
    write_manifest(str(args.output) + ".manifest", "features",
                   {**resolved, "mode": args.mode},
                   [args.corpus, args.bpe, args.vocab])
    print(f"wrote {len(matrices)} {args.mode} records -> {args.output}")
    return 0


def _feature_source(source: str, provider: FeatureProvider, pairs,
                    recon_store=None):
    """d2pf:<path>, a bare path, or a provider mode / 'surrogate'."""
    if source.startswith("d2pf:") or Path(source).exists():
        path = source[len("d2pf:"):] if source.startswith("d2pf:") else source
        return StoredFeatures(records_to_dict(read_d2pf(path)))
    if source == "surrogate":
        if recon_store is None:
            raise ConfigError("surrogate features need a reconstructed source")
        return StoredFeatures(authentic_surrogate(recon_store, provider.seed))
    if source in FeatureProvider.MODES:
        return StoredFeatures(materialize_features(pairs, provider, source))
    raise ConfigError(f"unrecognized feature source {source!r}")


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "epochs": args.epochs}
    model_cfg, diff_cfg, train_cfg, resolved = _resolve_configs(args, overrides)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    src_lines = _load_lines(args.src)
    tgt_lines = _load_lines(args.tgt)
    if args.bpe and args.vocab:
        bpe, vocab = _load_tokenizer(args)
    else:
        bpe = BPEModel.learn(src_lines + tgt_lines, train_cfg.bpe_merges)
        vocab = Vocabulary.from_corpus(
            bpe.segment_line(line) for line in src_lines + tgt_lines)
        bpe.save(outdir / "merges.txt")
        vocab.save(outdir / "vocab.txt")
    model_cfg = dataclasses.replace(model_cfg, vocab_size=len(vocab))
    resolved["vocab_size"] = len(vocab)

    pairs = encode_corpus(src_lines, tgt_lines, bpe, vocab)
    provider = FeatureProvider(model_cfg.feature_count, model_cfg.feature_dim,
                               cfg=diff_cfg, seed=resolved["seed"])
    recon_source = _feature_source(args.features_recon, provider, pairs)
    auth_source = _feature_source(args.features_auth, provider, pairs,
                                  recon_store=getattr(recon_source, "matrices",
                                                      None))
    batcher = TokenBatcher(pairs, auth_source, recon_source,
                           budget=train_cfg.batch_tokens,
                           seed=resolved["seed"])
    model = DualBranchModel(model_cfg, np.random.default_rng(resolved["seed"]))
    trainer = Trainer(model, train_cfg, batcher, vocab=vocab,
                      checkpoint_dir=outdir / "checkpoints")
    if args.resume:
        trainer.resume(args.resume)
    report = trainer.train()
    report.write(outdir / "train_report.tsv")
    final = outdir / "model.ckpt"
    save_checkpoint(final, model.state_dict(), model_cfg,
                    meta={"epochs": train_cfg.epochs})
    inputs = [args.src, args.tgt] + ([args.config] if args.config else [])
    write_manifest(outdir / "manifest.txt", "train", resolved, inputs)
    last = report.steps[-1] if report.steps else None
    if last:
        print(f"trained {len(report.steps)} steps; final total loss "
              f"{last.total:.4f}; checkpoint -> {final}")
    return 0


def cmd_translate(args) -> int:
    data = load_checkpoint(args.checkpoint)
    model = DualBranchModel(data.config,
                            np.random.default_rng(default_seed()))
    model.load_state_dict(data.params)
    bpe, vocab = _load_tokenizer(args)
    _, diff_cfg, _, resolved = _resolve_configs(args, {"seed": args.seed})
    lines = _load_lines(args.input)
    provider = FeatureProvider(data.config.feature_count,
                               data.config.feature_dim, cfg=diff_cfg,
                               seed=resolved["seed"])
    stored = (records_to_dict(read_d2pf(args.features))
              if args.features else None)
    hyps = []
    for i, line in enumerate(lines):
        ids = vocab.encode(bpe.segment_line(line)) + [EOS_ID]
        if stored is not None:
            if i not in stored:
                raise DataError(f"no feature record for sentence id {i}")
            feats = stored[i]
        else:
            feats = provider.provide(ids, args.feature_mode, sentence_key=i)
        hyp = beam_search(model, ids, feats, beam_size=args.beam)
        hyps.append(detokenize(vocab.decode(hyp.tokens)))
    Path(args.output).write_text("\n".join(hyps) + "\n", encoding="utf-8")
    write_manifest(str(args.output) + ".manifest", "translate",
                   {**resolved, "beam": args.beam,
                    "feature_mode": args.feature_mode},
                   [args.input, args.checkpoint])
    print(f"translated {len(hyps)} sentences -> {args.output}")
    return 0


def cmd_score(args) -> int:
    hyps = _load_lines(args.hyp)
    refs = _load_lines(args.ref)
    report = corpus_bleu(hyps, refs, smoothing=args.smoothing)
    print(report.format_text())
    print(report.format_machine())
    return 0


def cmd_avg_checkpoints(args) -> int:
    paths = sorted(args.inputs)[-args.last:] if args.last else args.inputs
    data = average_checkpoints(paths)
    save_checkpoint(args.output, data.params, data.config, meta=data.meta)
    print(f"averaged {len(paths)} checkpoints -> {args.output}")
    return 0


def cmd_gradcheck(args) -> int:
    failures = _run_gradient_oracle(verbose=True, seed=args.seed or 0)
    if failures:
        print(f"FAILED: {failures} gradient checks above tolerance")
        return 3
    print("all gradient checks passed")
    return 0


def cmd_ablate(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else default_seed()
    corpus = build_toy_corpus(train_pairs=args.train_pairs,
                              test_pairs=args.test_pairs, seed=seed)
    variants = args.variants or list(ABLATION_VARIANTS)
    rows = []
    for variant in variants:
        if variant not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation variant {variant!r}")
        bleu, experiment = run_ablation(
            variant, train_overrides={"epochs": args.epochs,
                                      "warmup_steps": args.warmup},
            seed=seed, corpus=corpus, beam_size=args.beam)
        last = experiment.trainer.report.steps[-1]
        rows.append((variant, bleu, last.total))
        print(f"ablate: {variant} done (BLEU {bleu:.4f})")
    header = f"{'variant':<16}{'bleu':>10}{'final_loss':>14}"
    lines = [header] + [f"{v:<16}{b:>10.4f}{l:>14.4f}" for v, b, l in rows]
    table = "\n".join(lines)
    (outdir / "ablation_table.txt").write_text(table + "\n", encoding="utf-8")
    write_manifest(outdir / "manifest.txt", "ablate",
                   {"seed": seed, "epochs": args.epochs,
                    "train_pairs": args.train_pairs,
                    "variants": ",".join(variants)}, [])
    print(table)
    return 0


# -- gradient oracle used by the gradcheck command ------------------------------

def _run_gradient_oracle(verbose: bool, seed: int = 0) -> int:
    from .nn import (Embedding, FeedForward, LayerNorm, Linear,
                     MultiHeadAttention, label_smoothed_loss)
    from .config import ModelConfig
    from .tensor import Tensor

    failures = 0

    def check(name, fn, leaves, tol=1e-4, eps=1e-5):
        nonlocal failures
        err = T.check_gradients(fn, leaves, eps=eps)
        status = "ok" if err <= tol else "FAIL"
        if err > tol:
            failures += 1
        if verbose:
            print(f"  {name:<26} max rel err {err:.3e}  [{status}]")

    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    check("matmul", lambda: (T.matmul(a, b) ** 2.0).sum(), [a, b])
    x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 6)))
    check("softmax_rows", lambda: (T.softmax_rows(x) * w).sum(), [x])
    xc = Tensor(rng.standard_normal((1, 2, 6, 7)), requires_grad=True)
    kc = Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
    check("conv2d_grouped",
          lambda: (T.conv2d(xc, kc, padding=1, groups=2) ** 2.0).sum(),
          [xc, kc])
    attn = MultiHeadAttention(8, 2, rng, dtype=np.float64)
    q = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
    kv = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    check("attention", lambda: (attn(q, kv) ** 2.0).sum(),
          [q, kv] + attn.parameters())
    ffn = FeedForward(6, 9, 6, rng, dtype=np.float64)
    norm = LayerNorm(6, dtype=np.float64)
    h = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    check("layernorm_ffn", lambda: (ffn(norm(h)) ** 2.0).sum(),
          [h] + ffn.parameters() + norm.parameters())

    cfg = ModelConfig(vocab_size=12, enc_layers=1, dec_layers=1, model_dim=16,
                      ffn_dim=24, heads=4, dropout=0.0, max_len=12,
                      feature_count=6, feature_dim=8, prompt_channels=4,
                      fc_bottleneck=8)
    model = DualBranchModel(cfg, np.random.default_rng(seed + 1),
                            dtype=np.float64)
    for p in model.parameters():  # move zero inits off the ReLU kink
        if not p.data.any():
            p.data = rng.uniform(-0.05, 0.05, p.data.shape)
    src = np.array([[5, 6, 7, 2]])
    src_pad = np.zeros((1, 4), dtype=bool)
    feats = rng.standard_normal((1, 6, 8))
    tgt_in = np.array([[1, 4, 8, 9]])
    targets = np.array([[4, 8, 9, 2]])

    def model_loss():
        logits = model.branch_logits("recon", src, src_pad,
                                     Tensor(feats), tgt_in)
        return label_smoothed_loss(logits, targets, 0, 0.1)

    params = model.parameters()
    picks = np.random.default_rng(seed + 2).choice(len(params), 8,
                                                   replace=False)
    check("composed_model", model_loss, [params[i] for i in picks], tol=1e-3)
    return failures


# -- parser ---------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="dualmmt",
                     description="Dual-branch prompt-based multimodal "
                                 "translation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bpe-learn", help="learn joint BPE merges + vocabulary")
    p.add_argument("--input", nargs="+", required=True,
                   help="corpus files (source and target)")
    p.add_argument("--merges", type=int, default=10000)
    p.add_argument("--output", required=True, help="merges file to write")
    p.add_argument("--vocab", required=True, help="vocabulary file to write")
    p.set_defaults(fn=cmd_bpe_learn)

    p = sub.add_parser("bpe-apply", help="segment a corpus with learned merges")
    p.add_argument("--bpe", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_bpe_apply)

    p = sub.add_parser("features", help="generate or validate feature files")
    p.add_argument("--validate", help="validate an existing feature file")
    p.add_argument("--mode", choices=["reconstructed", "noise"],
                   default="reconstructed")
    p.add_argument("--corpus")
    p.add_argument("--bpe")
    p.add_argument("--vocab")
    p.add_argument("--output")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_features, _needs=("corpus", "bpe", "vocab", "output"))

    p = sub.add_parser("train", help="dual-branch consistency training")
    p.add_argument("--config")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--bpe")
    p.add_argument("--vocab")
    p.add_argument("--features-recon", default="reconstructed",
                   help="D2PF path or provider mode for the reconstructed "
                        "branch")
    p.add_argument("--features-auth", default="surrogate",
                   help="D2PF path, provider mode, or 'surrogate'")
    p.add_argument("--outdir", required=True)
    p.add_argument("--resume")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("translate", help="decode a corpus with beam search")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bpe", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--features", help="optional D2PF file; defaults to the "
                                      "reconstructed provider")
    p.add_argument("--feature-mode", choices=["reconstructed", "noise"],
                   default="reconstructed")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("score", help="corpus BLEU of hypotheses vs references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--smoothing", choices=["none", "add_one"], default="none")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("avg-checkpoints", help="average trained checkpoints")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--last", type=int,
                   help="use only the lexicographically last N inputs")
    p.set_defaults(fn=cmd_avg_checkpoints)

    p = sub.add_parser("gradcheck", help="finite-difference gradient oracle")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score the ablation variants")
    p.add_argument("--outdir", required=True)
    p.add_argument("--variants", nargs="*",
                   help=f"subset of {', '.join(ABLATION_VARIANTS)}")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--train-pairs", type=int, default=1000)
    p.add_argument("--test-pairs", type=int, default=30)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for field in getattr(args, "_needs", ()):
        if getattr(args, field) is None and not getattr(args, "validate", None):
            parser.error(f"--{field.replace('_', '-')} is required here")
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except DualMMTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
