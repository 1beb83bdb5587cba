"""Checkpoint container round-trips and parameter averaging."""

import numpy as np
import pytest

from dualmmt.checkpoint import (aligned_optim_state, average_checkpoints,
                                load_checkpoint, save_checkpoint)
from dualmmt.config import ModelConfig
from dualmmt.dualbranch import DualBranchModel
from dualmmt.errors import BadMagicError, DataError, TruncatedFileError
from dualmmt.optim import Adam


def tiny_cfg(**overrides):
    base = dict(vocab_size=9, enc_layers=1, dec_layers=1, model_dim=8,
                ffn_dim=12, heads=2, dropout=0.0, max_len=10,
                feature_count=5, feature_dim=6, prompt_channels=4,
                fc_bottleneck=8)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed=0, **overrides):
    return DualBranchModel(tiny_cfg(**overrides), np.random.default_rng(seed))


class TestRoundTrip:
    def test_bit_exact_parameters(self, tmp_path):
        model = tiny_model(seed=1)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model.state_dict(), model.cfg)
        data = load_checkpoint(path)
        assert set(data.params) == set(model.state_dict())
        for name, arr in model.state_dict().items():
            np.testing.assert_array_equal(data.params[name], arr)
            assert data.params[name].dtype == arr.dtype

    def test_config_restored(self, tmp_path):
        model = tiny_model(seed=2, heads=4, model_dim=16)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model.state_dict(), model.cfg, meta={"epoch": 3})
        data = load_checkpoint(path)
        assert data.config == model.cfg
        assert data.meta["epoch"] == 3

    def test_reload_into_model_reproduces_outputs(self, tmp_path):
        model = tiny_model(seed=3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model.state_dict(), model.cfg)
        clone = tiny_model(seed=99)
        clone.load_state_dict(load_checkpoint(path).params)
        rng = np.random.default_rng(4)
        src = np.array([[4, 5, 2]])
        pad = np.zeros((1, 3), dtype=bool)
        feats = rng.standard_normal((1, 5, 6)).astype(np.float32)
        tgt_in = np.array([[1, 4, 6]])
        np.testing.assert_array_equal(
            model.branch_logits("recon", src, pad, feats, tgt_in).data,
            clone.branch_logits("recon", src, pad, feats, tgt_in).data)

    def test_optimizer_state_roundtrip(self, tmp_path):
        model = tiny_model(seed=5)
        opt = Adam(model.parameters(), lr=0.01, accum_steps=1, warmup=3)
        rng = np.random.default_rng(6)
        for p in model.parameters():
            p.grad = rng.standard_normal(p.data.shape).astype(p.data.dtype)
        opt.micro_step()
        path = tmp_path / "opt.ckpt"
        save_checkpoint(path, model.state_dict(), model.cfg,
                        optim_state=opt.state_dict())
        data = load_checkpoint(path)
        assert data.optim["step_count"] == 1
        names = [n for n, _ in model.named_parameters()]
        restored = aligned_optim_state(data, names)
        for a, b in zip(restored["m"], opt.m):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(restored["v"], opt.v):
            np.testing.assert_array_equal(a, b)

    def test_corrupt_magic(self, tmp_path):
        model = tiny_model(seed=7)
        path = tmp_path / "bad.ckpt"
        save_checkpoint(path, model.state_dict(), model.cfg)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        model = tiny_model(seed=8)
        path = tmp_path / "cut.ckpt"
        save_checkpoint(path, model.state_dict(), model.cfg)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(path)


class TestAveraging:
    def save_model(self, tmp_path, name, seed):
        model = tiny_model(seed=seed)
        path = tmp_path / name
        save_checkpoint(path, model.state_dict(), model.cfg)
        return model, path

    def test_single_checkpoint_identity(self, tmp_path):
        model, path = self.save_model(tmp_path, "one.ckpt", 10)
        data = average_checkpoints([path])
        for name, arr in model.state_dict().items():
            np.testing.assert_array_equal(data.params[name], arr)

    def test_self_average_identity(self, tmp_path):
        model, path = self.save_model(tmp_path, "self.ckpt", 11)
        data = average_checkpoints([path, path])
        for name, arr in model.state_dict().items():
            np.testing.assert_allclose(data.params[name], arr, rtol=1e-7)

    def test_two_value_mean(self, tmp_path):
        cfg = tiny_cfg()
        a = {"w": np.array([2.0], dtype=np.float32)}
        b = {"w": np.array([4.0], dtype=np.float32)}
        pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(pa, a, cfg)
        save_checkpoint(pb, b, cfg)
        data = average_checkpoints([pa, pb])
        np.testing.assert_allclose(data.params["w"], [3.0])
        assert data.optim is None

    def test_manifest_mismatch_rejected(self, tmp_path):
        cfg = tiny_cfg()
        pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(pa, {"w": np.zeros(2, np.float32)}, cfg)
        save_checkpoint(pb, {"w": np.zeros(3, np.float32)}, cfg)
        with pytest.raises(DataError):
            average_checkpoints([pa, pb])

    def test_config_mismatch_rejected(self, tmp_path):
        pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(pa, {"w": np.zeros(2, np.float32)}, tiny_cfg())
        save_checkpoint(pb, {"w": np.zeros(2, np.float32)}, tiny_cfg(heads=4, model_dim=16))
        with pytest.raises(DataError):
            average_checkpoints([pa, pb])

    def test_optimizer_state_discarded(self, tmp_path):
        model = tiny_model(seed=12)
        opt = Adam(model.parameters(), accum_steps=1)
        for p in model.parameters():
            p.grad = np.ones_like(p.data)
        opt.micro_step()
        path = tmp_path / "o.ckpt"
        save_checkpoint(path, model.state_dict(), model.cfg,
                        optim_state=opt.state_dict())
        data = average_checkpoints([path])
        assert data.optim is None
