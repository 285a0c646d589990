"""Adapter tests: identity at attach, exact counts, merge equivalence."""

import numpy as np
import pytest

from conftest import random_sample, tiny_config

from vlmtune import peft
from vlmtune.autograd import Tensor
from vlmtune.config import micro_config, full_config
from vlmtune.errors import AttachError, ConfigError
from vlmtune.gradcheck import model_gradcheck
from vlmtune.model import build_model
from vlmtune.plans import TuningPlan, apply_plan


def full_logits(model, sample):
    fused = model.encode_jtm(sample.question_ids, model.encode_image(sample.image))
    return model.decode_text(fused, [model.bos_id] + list(sample.answer_ids)).data


def peft_total(model):
    return sum(peft.peft_param_count(c) for c in model.components.values())


@pytest.fixture
def toy_pair():
    cfg = tiny_config()
    model = build_model(cfg, seed=101)
    sample = random_sample(cfg, np.random.default_rng(7))
    return model, sample


class TestLoRA:
    def test_identity_at_attach_bitwise(self, toy_pair):
        model, s = toy_pair
        base = full_logits(model, s)
        rng = np.random.default_rng(0)
        for comp in model.components.values():
            peft.attach_lora(comp, rank=4, rng=rng)
        np.testing.assert_array_equal(full_logits(model, s), base)

    def test_double_attach_rejected(self, toy_pair):
        model, _ = toy_pair
        peft.attach_lora(model.jtm, rank=2)
        with pytest.raises(AttachError):
            peft.attach_lora(model.jtm, rank=2)

    def test_count_matches_closed_form_at_full_scale(self):
        cfg = full_config()
        model = build_model(cfg)
        peft.attach_lora(model.jtm, rank=4)
        peft.attach_lora(model.dec, rank=4)
        # 12 layers x 2 attention sites per component, q and k each 2*d*r
        want = peft.lora_count(cfg, n_attention_sites=48, rank=4)
        assert want == 589824
        assert peft_total(model) == want

    def test_rank_doubling_doubles_count(self):
        cfg = tiny_config()
        m4 = build_model(cfg)
        m8 = build_model(cfg)
        for comp in (m4.jtm, m4.dec):
            peft.attach_lora(comp, rank=4)
        for comp in (m8.jtm, m8.dec):
            peft.attach_lora(comp, rank=8)
        assert peft_total(m8) == 2 * peft_total(m4)

    def test_rank_below_one_rejected(self, toy_pair):
        model, _ = toy_pair
        with pytest.raises(ConfigError):
            peft.attach_lora(model.dec, rank=0)


class TestLoRAMerge:
    def test_merge_at_init_keeps_weights_bitwise(self, toy_pair):
        model, _ = toy_pair
        peft.attach_lora(model.dec, rank=4, rng=np.random.default_rng(1))
        before = {n: t.data.copy() for n, t in model.dec.base_named_parameters()}
        peft.merge_lora(model.dec)
        for n, t in model.dec.base_named_parameters():
            assert t.data.tobytes() == before[n].tobytes(), n

    def test_merged_matches_unmerged_forward(self, toy_pair):
        model, s = toy_pair
        rng = np.random.default_rng(2)
        for comp in model.components.values():
            peft.attach_lora(comp, rank=4, rng=rng)
            for _, attn in comp.blocks[0].attention_sites():
                attn.lora_q.b.data[:] = rng.normal(0, 0.02, attn.lora_q.b.shape)
                attn.lora_k.b.data[:] = rng.normal(0, 0.02, attn.lora_k.b.shape)
        unmerged = full_logits(model, s)
        for comp in model.components.values():
            peft.merge_lora(comp)
        merged = full_logits(model, s)
        np.testing.assert_allclose(merged, unmerged, rtol=1e-5, atol=1e-6)

    def test_merge_clears_peft_counts(self, toy_pair):
        model, _ = toy_pair
        peft.attach_lora(model.jtm, rank=4)
        assert peft_total(model) > 0
        peft.merge_lora(model.jtm)
        assert peft_total(model) == 0

    def test_merge_without_units_warns(self, toy_pair):
        model, _ = toy_pair
        with pytest.warns(UserWarning):
            peft.merge_lora(model.vit)


class TestIA3:
    def test_identity_at_attach_bitwise(self, toy_pair):
        model, s = toy_pair
        base = full_logits(model, s)
        for comp in model.components.values():
            peft.attach_ia3(comp)
        np.testing.assert_array_equal(full_logits(model, s), base)

    def test_double_attach_rejected(self, toy_pair):
        model, _ = toy_pair
        peft.attach_ia3(model.vit)
        with pytest.raises(AttachError):
            peft.attach_ia3(model.vit)

    def test_count_formula(self):
        cfg = full_config()
        model = build_model(cfg)
        peft.attach_ia3(model.jtm)
        peft.attach_ia3(model.dec)
        want = peft.ia3_count(cfg, n_attention_sites=48, n_ffn_sites=24)
        assert peft_total(model) == want

    def test_self_only_site_selection_skips_cross(self):
        cfg = tiny_config()
        model = build_model(cfg)
        peft.attach_ia3(model.jtm, sites="self_only")
        n_layers = cfg.jtm_layers
        want = peft.ia3_count(cfg, n_attention_sites=n_layers, n_ffn_sites=n_layers)
        assert peft.peft_param_count(model.jtm) == want

    def test_zero_value_vector_silences_attention(self, toy_pair):
        model, s = toy_pair
        peft.attach_ia3(model.jtm)
        attn = model.jtm.blocks[0].self_attn
        attn.ia3.l_v.data[:] = 0.0
        x = Tensor(np.random.default_rng(3).normal(
            size=(4, model.cfg.hidden_dim)).astype(np.float32))
        out = attn(x)
        # context is zero, so only the (zero-initialized) output bias remains
        np.testing.assert_array_equal(out.data, np.zeros_like(out.data))


class TestPrefixAndPTv2:
    def test_prefix_p0_identity_bitwise(self, toy_pair):
        model, s = toy_pair
        base = full_logits(model, s)
        peft.attach_prefix(model.jtm, prefix_len=0, hidden=8)
        peft.attach_prefix(model.dec, prefix_len=0, hidden=8)
        np.testing.assert_array_equal(full_logits(model, s), base)

    def test_ptv2_p0_identity_bitwise(self, toy_pair):
        model, s = toy_pair
        base = full_logits(model, s)
        peft.attach_ptv2(model.jtm, prefix_len=0)
        peft.attach_ptv2(model.dec, prefix_len=0)
        np.testing.assert_array_equal(full_logits(model, s), base)

    def test_attention_rows_cover_prefix_plus_tokens(self):
        cfg = tiny_config()
        model = build_model(cfg, seed=41)
        peft.attach_prefix(model.jtm, prefix_len=4, hidden=8,
                           rng=np.random.default_rng(4))
        kvs = model.jtm.peft_prefix.layer_kv()
        attn = model.jtm.blocks[0].self_attn
        x = Tensor(np.random.default_rng(5).normal(size=(10, cfg.hidden_dim)).astype(np.float32))
        _, probs = attn(x, prefix_kv=kvs[0], return_probs=True)
        assert probs.shape == (cfg.num_heads, 10, 14)
        sums = probs.data.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)

    def test_causal_prefix_stays_visible(self):
        cfg = tiny_config()
        model = build_model(cfg, seed=43)
        peft.attach_ptv2(model.dec, prefix_len=3, rng=np.random.default_rng(6))
        kvs = model.dec.peft_prefix.layer_kv()
        attn = model.dec.blocks[0].self_attn
        x = Tensor(np.random.default_rng(7).normal(size=(5, cfg.hidden_dim)).astype(np.float32))
        _, probs = attn(x, prefix_kv=kvs[0], return_probs=True)
        # prefix columns carry mass everywhere; future token columns are zero
        assert np.all(probs.data[:, 0, :4] > 0)
        assert np.all(probs.data[:, 0, 4:] == 0)

    def test_removal_restores_base_outputs_bitwise(self, toy_pair):
        model, s = toy_pair
        base = full_logits(model, s)
        peft.attach_prefix(model.dec, prefix_len=4, hidden=8,
                           rng=np.random.default_rng(8))
        changed = full_logits(model, s)
        assert changed.tobytes() != base.tobytes()
        peft.detach_adapters(model.dec)
        np.testing.assert_array_equal(full_logits(model, s), base)

    def test_vit_prefix_rejected(self, toy_pair):
        model, _ = toy_pair
        with pytest.raises(AttachError):
            peft.attach_prefix(model.vit, prefix_len=4)

    def test_budget_exceeded_rejected(self):
        cfg = tiny_config(attn_budget=50)
        model = build_model(cfg)
        with pytest.raises(ConfigError):
            peft.attach_prefix(model.dec, prefix_len=3)  # 3 + 48 > 50

    def test_ptv2_counts(self):
        cfg = full_config()
        model = build_model(cfg)
        peft.attach_ptv2(model.dec, prefix_len=10)
        assert peft_total(model) == 184320
        assert peft.ptv2_count(cfg, 12, 10) == 184320
        peft.attach_ptv2(model.jtm, prefix_len=10)
        assert peft_total(model) == 2 * 184320

    def test_prefix_count_formula(self):
        cfg = full_config()
        model = build_model(cfg)
        peft.attach_prefix(model.dec, prefix_len=16, hidden=768)
        want = peft.prefix_count(cfg, 12, 16, 768)
        assert peft_total(model) == want == 14777088

    def test_double_attach_rejected(self, toy_pair):
        model, _ = toy_pair
        peft.attach_ptv2(model.dec, prefix_len=2)
        with pytest.raises(AttachError):
            peft.attach_prefix(model.dec, prefix_len=2)


class TestAdapterGradients:
    """Finite-difference check over every adapter tensor on a micro model."""

    @pytest.mark.parametrize("plan", [
        "LoRA1,LoRA1,LoRA1", "IA3,IA3,IA3", "F,Prefix2x4,Prefix2x4", "F,PTv2-2,PTv2-2",
    ])
    def test_adapter_parameters_match_finite_differences(self, plan):
        cfg = micro_config()  # float64
        model = build_model(cfg, seed=53)
        apply_plan(model, TuningPlan.parse(plan), rng=np.random.default_rng(54))
        # give the identity-initialized tensors signal so gradients are generic
        rng = np.random.default_rng(55)
        for name, t in model.named_parameters():
            if name.startswith("peft/"):
                t.data += rng.normal(0, 0.05, t.data.shape)
        sample = random_sample(cfg, np.random.default_rng(56), q_len=4, a_len=2)
        report = model_gradcheck(model, sample, rtol=1e-3)
        assert report.ok, [c.name for c in report.failures]
