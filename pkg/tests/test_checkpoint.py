"""Checkpoint format tests: round trips, config guards, adapter export."""

import numpy as np
import pytest

from conftest import random_sample, tiny_config

from vlmtune.checkpoint import (load_model, load_tensors, optimizer_state_from,
                                save_model, save_tensors)
from vlmtune.errors import CheckpointMismatchError
from vlmtune.model import build_model
from vlmtune.optim import AdamW
from vlmtune.plans import TuningPlan, apply_plan


def logits_of(model, sample):
    fused = model.encode_jtm(sample.question_ids, model.encode_image(sample.image))
    return model.decode_text(fused, [model.bos_id] + list(sample.answer_ids)).data


class TestRoundTrip:
    def test_weights_bit_identical(self, tmp_path):
        cfg = tiny_config()
        model = build_model(cfg, seed=1)
        path = tmp_path / "m.ckpt"
        save_model(path, model)
        clone = build_model(cfg, seed=2)
        load_model(path, clone)
        for (n1, t1), (n2, t2) in zip(model.named_parameters(), clone.named_parameters()):
            assert n1 == n2
            assert t1.data.tobytes() == t2.data.tobytes(), n1

    def test_header_carries_config_and_extras(self, tmp_path):
        cfg = tiny_config()
        model = build_model(cfg, seed=1)
        path = tmp_path / "m.ckpt"
        save_model(path, model, extras={"epoch": 3})
        _, header = load_tensors(path)
        assert header["model_config"] == cfg.to_dict()
        assert header["extras"]["epoch"] == 3

    def test_mismatched_config_lists_fields(self, tmp_path):
        model = build_model(tiny_config(), seed=1)
        path = tmp_path / "m.ckpt"
        save_model(path, model)
        other = build_model(tiny_config(hidden_dim=64, ffn_dim=128), seed=1)
        with pytest.raises(CheckpointMismatchError) as e:
            load_model(path, other)
        assert "hidden_dim" in str(e.value)
        assert "ffn_dim" in str(e.value)

    def test_missing_tensor_rejected_when_strict(self, tmp_path):
        cfg = tiny_config()
        model = build_model(cfg, seed=1)
        tensors = {n: t.data for n, t in model.named_parameters()}
        tensors.pop("dec/ln_f/g")
        save_tensors(tmp_path / "m.ckpt", tensors, cfg)
        with pytest.raises(CheckpointMismatchError):
            load_model(tmp_path / "m.ckpt", build_model(cfg, seed=1))

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"hello world")
        with pytest.raises(CheckpointMismatchError):
            load_tensors(p)


class TestOptimizerState:
    def test_moments_round_trip(self, tmp_path):
        cfg = tiny_config()
        model = build_model(cfg, seed=3)
        apply_plan(model, TuningPlan.parse("F,T,T"))
        params = list(model.trainable_parameters())
        opt = AdamW(params, base_lr=1e-3, total_steps=5)
        for _, t in params:
            t.grad = np.full_like(t.data, 0.01)
        opt.step()
        path = tmp_path / "m.ckpt"
        save_model(path, model, optimizer=opt)

        clone = build_model(cfg, seed=4)
        apply_plan(clone, TuningPlan.parse("F,T,T"))
        extras, tensors = load_model(path, clone)
        opt2 = AdamW(list(clone.trainable_parameters()), base_lr=1e-3, total_steps=5)
        opt2.load_state(optimizer_state_from(tensors), extras["optimizer"])
        assert opt2.step_count == 1
        for name in opt.m:
            np.testing.assert_array_equal(opt.m[name], opt2.m[name])
            np.testing.assert_array_equal(opt.v[name], opt2.v[name])


class TestAdapterExport:
    def test_adapter_only_export_and_reattach(self, tmp_path):
        cfg = tiny_config()
        rng = np.random.default_rng(5)
        model = build_model(cfg, seed=7)
        apply_plan(model, TuningPlan.parse("F,LoRA4,PTv2-3"), rng=rng)
        # perturb adapters so they carry signal
        for name, t in model.named_parameters():
            if name.startswith("peft/"):
                t.data += rng.normal(0, 0.05, t.data.shape).astype(t.data.dtype)
        sample = random_sample(cfg, np.random.default_rng(8))
        want = logits_of(model, sample)

        path = tmp_path / "adapters.ckpt"
        save_model(path, model, adapter_only=True)
        names, _ = load_tensors(path)
        assert names and all(n.startswith("peft/") for n in names)

        # same base seed, fresh adapters, then load the exported ones
        clone = build_model(cfg, seed=7)
        apply_plan(clone, TuningPlan.parse("F,LoRA4,PTv2-3"), rng=np.random.default_rng(99))
        load_model(path, clone)
        np.testing.assert_array_equal(logits_of(clone, sample), want)
