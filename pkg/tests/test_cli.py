"""CLI contract: exit codes, help, manifests, reproducibility."""

import os
from pathlib import Path

import numpy as np
import pytest

from dualmmt.cli import build_parser, main
from dualmmt.d2pf import validate_d2pf


def run(argv):
    return main(argv)


@pytest.fixture
def corpus(tmp_path):
    src = tmp_path / "src.txt"
    tgt = tmp_path / "tgt.txt"
    src.write_text("ab cd ab\ncd cd\nab ab cd ab\n", encoding="utf-8")
    tgt.write_text("ba dc ba\ndc dc\nba ba dc ba\n", encoding="utf-8")
    return src, tgt


@pytest.fixture
def tokenizer(tmp_path, corpus):
    src, tgt = corpus
    merges = tmp_path / "merges.txt"
    vocab = tmp_path / "vocab.txt"
    assert run(["bpe-learn", "--input", str(src), str(tgt),
                "--merges", "20", "--output", str(merges),
                "--vocab", str(vocab)]) == 0
    return merges, vocab


class TestExitCodes:
    def test_score_same_file_is_bleu_one(self, tmp_path, capsys):
        f = tmp_path / "lines.txt"
        f.write_text("a b c\nd e f g\n", encoding="utf-8")
        assert run(["score", "--hyp", str(f), "--ref", str(f)]) == 0
        out = capsys.readouterr().out
        assert "BLEU = 1.0000" in out
        assert "bleu = 1.0" in out

    def test_train_missing_config_exits_2_with_path(self, tmp_path, corpus,
                                                    capsys):
        src, tgt = corpus
        code = run(["train", "--config", str(tmp_path / "missing.cfg"),
                    "--src", str(src), "--tgt", str(tgt),
                    "--outdir", str(tmp_path / "out")])
        assert code == 2
        assert "missing.cfg" in capsys.readouterr().err

    def test_unknown_config_key_exits_1(self, tmp_path, corpus, capsys):
        src, tgt = corpus
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("mystery_knob = 3\n", encoding="utf-8")
        code = run(["train", "--config", str(cfg), "--src", str(src),
                    "--tgt", str(tgt), "--outdir", str(tmp_path / "out")])
        assert code == 1
        assert "mystery_knob" in capsys.readouterr().err

    def test_unknown_flag_rejected(self):
        with pytest.raises(SystemExit) as exc:
            run(["score", "--hyp", "x", "--ref", "y", "--bogus"])
        assert exc.value.code == 1

    def test_missing_data_file_exits_2(self, tmp_path, capsys):
        code = run(["score", "--hyp", str(tmp_path / "none.txt"),
                    "--ref", str(tmp_path / "none.txt")])
        assert code == 2

    def test_help_on_every_command(self, capsys):
        parser = build_parser()
        for command in ["bpe-learn", "bpe-apply", "features", "train",
                        "translate", "score", "avg-checkpoints", "gradcheck",
                        "ablate"]:
            with pytest.raises(SystemExit) as exc:
                parser.parse_args([command, "--help"])
            assert exc.value.code == 0
            assert "--" in capsys.readouterr().out


class TestFeaturesCommand:
    def test_generate_validate_roundtrip(self, tmp_path, corpus, tokenizer,
                                         capsys):
        src, _ = corpus
        merges, vocab = tokenizer
        cfg = tmp_path / "toy.cfg"
        cfg.write_text("feature_count = 6\nfeature_dim = 8\n"
                       "diffusion_steps = 4\n", encoding="utf-8")
        out = tmp_path / "feats.d2pf"
        assert run(["features", "--mode", "reconstructed", "--corpus",
                    str(src), "--bpe", str(merges), "--vocab", str(vocab),
                    "--output", str(out), "--config", str(cfg)]) == 0
        assert validate_d2pf(out)["records"] == 3
        assert run(["features", "--validate", str(out)]) == 0
        assert "OK" in capsys.readouterr().out
        assert (tmp_path / "feats.d2pf.manifest").exists()

    def test_deterministic_across_runs(self, tmp_path, corpus, tokenizer):
        src, _ = corpus
        merges, vocab = tokenizer
        cfg = tmp_path / "toy.cfg"
        cfg.write_text("feature_count = 5\nfeature_dim = 8\n"
                       "diffusion_steps = 3\n", encoding="utf-8")
        outs = []
        for name in ("a.d2pf", "b.d2pf"):
            out = tmp_path / name
            assert run(["features", "--mode", "noise", "--corpus", str(src),
                        "--bpe", str(merges), "--vocab", str(vocab),
                        "--output", str(out), "--config", str(cfg)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_seed_env_override(self, tmp_path, corpus, tokenizer, monkeypatch):
        src, _ = corpus
        merges, vocab = tokenizer
        cfg = tmp_path / "toy.cfg"
        cfg.write_text("feature_count = 5\nfeature_dim = 8\n"
                       "diffusion_steps = 3\n", encoding="utf-8")

        def generate(name):
            out = tmp_path / name
            assert run(["features", "--mode", "noise", "--corpus", str(src),
                        "--bpe", str(merges), "--vocab", str(vocab),
                        "--output", str(out), "--config", str(cfg)]) == 0
            return out.read_bytes()

        default = generate("default.d2pf")
        monkeypatch.setenv("D2P_SEED", "123")
        overridden = generate("env.d2pf")
        assert default != overridden


class TestPipelineCommands:
    def test_train_translate_score_smoke(self, tmp_path, corpus, capsys):
        src, tgt = corpus
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text("\n".join([
            "enc_layers = 1", "dec_layers = 1", "model_dim = 16",
            "ffn_dim = 24", "heads = 2", "dropout = 0.0", "max_len = 24",
            "feature_count = 6", "feature_dim = 8", "prompt_channels = 4",
            "fc_bottleneck = 8", "diffusion_steps = 3", "epochs = 2",
            "batch_tokens = 64", "lr = 0.002", "warmup_steps = 4",
            "accum_steps = 1", "bpe_merges = 16",
        ]) + "\n", encoding="utf-8")
        outdir = tmp_path / "run"
        assert run(["train", "--config", str(cfg), "--src", str(src),
                    "--tgt", str(tgt), "--outdir", str(outdir)]) == 0
        assert (outdir / "model.ckpt").exists()
        assert (outdir / "manifest.txt").exists()
        assert (outdir / "train_report.tsv").exists()
        manifest = (outdir / "manifest.txt").read_text()
        assert "command = train" in manifest and "seed = 47" in manifest

        hyp = tmp_path / "hyp.txt"
        assert run(["translate", "--checkpoint", str(outdir / "model.ckpt"),
                    "--bpe", str(outdir / "merges.txt"),
                    "--vocab", str(outdir / "vocab.txt"),
                    "--input", str(src), "--output", str(hyp),
                    "--config", str(cfg), "--beam", "2"]) == 0
        assert len(hyp.read_text().splitlines()) == 3
        assert run(["score", "--hyp", str(hyp), "--ref", str(tgt),
                    "--smoothing", "add_one"]) == 0

    def test_avg_checkpoints_command(self, tmp_path, corpus):
        src, tgt = corpus
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text("\n".join([
            "enc_layers = 1", "dec_layers = 1", "model_dim = 16",
            "ffn_dim = 24", "heads = 2", "dropout = 0.0", "max_len = 24",
            "feature_count = 6", "feature_dim = 8", "prompt_channels = 4",
            "fc_bottleneck = 8", "diffusion_steps = 3", "epochs = 2",
            "batch_tokens = 64", "lr = 0.001", "warmup_steps = 4",
            "accum_steps = 1", "bpe_merges = 16",
        ]) + "\n", encoding="utf-8")
        outdir = tmp_path / "run"
        assert run(["train", "--config", str(cfg), "--src", str(src),
                    "--tgt", str(tgt), "--outdir", str(outdir)]) == 0
        ckpts = sorted((outdir / "checkpoints").glob("*.ckpt"))
        assert len(ckpts) == 2
        avg = tmp_path / "avg.ckpt"
        assert run(["avg-checkpoints", "--inputs"] + [str(c) for c in ckpts]
                   + ["--output", str(avg)]) == 0
        from dualmmt.checkpoint import load_checkpoint
        merged = load_checkpoint(avg)
        parts = [load_checkpoint(c) for c in ckpts]
        name = next(iter(merged.params))
        np.testing.assert_allclose(
            merged.params[name],
            (parts[0].params[name].astype(np.float64)
             + parts[1].params[name]) / 2, rtol=1e-6)


class TestGradcheckCommand:
    def test_gradcheck_passes(self, capsys):
        assert run(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "composed_model" in out and "FAIL" not in out
