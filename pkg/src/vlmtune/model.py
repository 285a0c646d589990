"""Three-component vision-language model.

An image encoder (ViT-style patch transformer), a joint text-multimodal
encoder whose layers interleave bidirectional self-attention, cross-attention
into the visual features, and a feed-forward block, and a causal text decoder
with the same layout plus a language-modeling head. Components expose
disjoint named-parameter sets so a tuning plan can freeze, train, or adapt
each one independently.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import MASK_VALUE, Tensor
from .config import ModelConfig
from .errors import ConfigError, ShapeMismatchError

INIT_STD = 0.02


def _param(rng: Optional[np.random.Generator], shape, dtype, kind: str = "normal") -> Tensor:
    """Create a trainable parameter; rng=None gives a counting-only model."""
    if kind == "zeros" or (rng is None and kind == "normal"):
        data = np.zeros(shape, dtype=dtype)
    elif kind == "ones":
        data = np.ones(shape, dtype=dtype)
    else:
        data = ag.trunc_normal(rng, shape, INIT_STD, dtype)
    return Tensor(data, trainable=True)


class LayerNorm:
    """Learned gain/bias around a zero-mean unit-variance normalization."""

    def __init__(self, dim: int, dtype, eps: float = 1e-6):
        self.gain = Tensor(np.ones(dim, dtype=dtype), trainable=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), trainable=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, self.eps)

    def named(self, prefix: str):
        yield f"{prefix}/g", self.gain
        yield f"{prefix}/b", self.bias


class Attention:
    """Multi-head attention with optional LoRA, IA3, and prefix hooks.

    ``kind`` is one of ``bi`` (bidirectional self), ``causal`` (causal self),
    or ``cross`` (queries from the text stream, keys/values from the visual
    stream). Adapters are absent until a tuning plan attaches them.
    """

    def __init__(self, cfg: ModelConfig, kind: str, rng):
        d = cfg.hidden_dim
        dt = cfg.np_dtype
        self.kind = kind
        self.num_heads = cfg.num_heads
        self.head_dim = d // cfg.num_heads
        self.wq = _param(rng, (d, d), dt)
        self.wk = _param(rng, (d, d), dt)
        self.wv = _param(rng, (d, d), dt)
        self.wo = _param(rng, (d, d), dt)
        self.bq = _param(None, (d,), dt, "zeros")
        self.bk = _param(None, (d,), dt, "zeros")
        self.bv = _param(None, (d,), dt, "zeros")
        self.bo = _param(None, (d,), dt, "zeros")
        # PEFT slots, populated by peft.attach_*
        self.lora_q = None
        self.lora_k = None
        self.ia3 = None

    def _mask(self, q_len: int, kv_len: int, dtype) -> Optional[Tensor]:
        if self.kind != "causal":
            return None
        prefix = kv_len - q_len
        m = np.zeros((q_len, kv_len), dtype=dtype)
        future = np.triu(np.ones((q_len, q_len), dtype=bool), k=1)
        m[:, prefix:][future] = MASK_VALUE
        return Tensor(m)

    def __call__(self, x: Tensor, kv: Optional[Tensor] = None,
                 prefix_kv: Optional[tuple[Tensor, Tensor]] = None,
                 return_probs: bool = False):
        src = kv if kv is not None else x
        q = ag.add(ag.matmul(x, self.wq), self.bq)
        k = ag.add(ag.matmul(src, self.wk), self.bk)
        v = ag.add(ag.matmul(src, self.wv), self.bv)
        if self.lora_q is not None:
            q = ag.add(q, self.lora_q.delta(x))
        if self.lora_k is not None:
            k = ag.add(k, self.lora_k.delta(src))
        if self.ia3 is not None:
            k = ag.mul(k, self.ia3.l_k)
            v = ag.mul(v, self.ia3.l_v)
        if prefix_kv is not None:
            pk, pv = prefix_kv
            if pk.shape[0] > 0:
                k = ag.concat([pk, k], axis=0)
                v = ag.concat([pv, v], axis=0)

        L = x.shape[0]
        S = k.shape[0]
        h, dk = self.num_heads, self.head_dim
        q3 = ag.transpose(ag.reshape(q, (L, h, dk)), (1, 0, 2))
        k3 = ag.transpose(ag.reshape(k, (S, h, dk)), (1, 2, 0))
        v3 = ag.transpose(ag.reshape(v, (S, h, dk)), (1, 0, 2))
        scores = ag.scale(ag.matmul(q3, k3), 1.0 / math.sqrt(dk))
        mask = self._mask(L, S, x.dtype)
        if mask is not None:
            scores = ag.add(scores, mask)
        attn = ag.softmax(scores, axis=-1)
        ctx = ag.matmul(attn, v3)
        merged = ag.reshape(ag.transpose(ctx, (1, 0, 2)), (L, h * dk))
        out = ag.add(ag.matmul(merged, self.wo), self.bo)
        if return_probs:
            return out, attn
        return out

    def named(self, prefix: str):
        for nm in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"):
            yield f"{prefix}/{nm}", getattr(self, nm)


class FeedForward:
    """Two-layer GELU MLP; the inner activation can carry an IA3 vector."""

    def __init__(self, cfg: ModelConfig, rng):
        d, f, dt = cfg.hidden_dim, cfg.ffn_dim, cfg.np_dtype
        self.w1 = _param(rng, (d, f), dt)
        self.b1 = _param(None, (f,), dt, "zeros")
        self.w2 = _param(rng, (f, d), dt)
        self.b2 = _param(None, (d,), dt, "zeros")
        self.ia3_ff = None

    def __call__(self, x: Tensor) -> Tensor:
        h = ag.gelu(ag.add(ag.matmul(x, self.w1), self.b1))
        if self.ia3_ff is not None:
            h = ag.mul(h, self.ia3_ff)
        return ag.add(ag.matmul(h, self.w2), self.b2)

    def named(self, prefix: str):
        for nm in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}/{nm}", getattr(self, nm)


class VisionBlock:
    """Pre-norm transformer block: bidirectional self-attention + FFN."""

    def __init__(self, cfg: ModelConfig, rng):
        self.ln1 = LayerNorm(cfg.hidden_dim, cfg.np_dtype)
        self.attn = Attention(cfg, "bi", rng)
        self.ln2 = LayerNorm(cfg.hidden_dim, cfg.np_dtype)
        self.ffn = FeedForward(cfg, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = ag.add(x, self.attn(self.ln1(x)))
        x = ag.add(x, self.ffn(self.ln2(x)))
        return x

    def named(self, prefix: str):
        yield from self.ln1.named(f"{prefix}/ln1")
        yield from self.attn.named(f"{prefix}/attn")
        yield from self.ln2.named(f"{prefix}/ln2")
        yield from self.ffn.named(f"{prefix}/ffn")

    def attention_sites(self):
        yield "self", self.attn


class FusionBlock:
    """Pre-norm block with self-attention, cross-attention, then FFN.

    The cross-attention sub-block sits between self-attention and the
    feed-forward layer and reads keys/values from the visual stream.
    """

    def __init__(self, cfg: ModelConfig, rng, causal: bool):
        d, dt = cfg.hidden_dim, cfg.np_dtype
        self.ln_self = LayerNorm(d, dt)
        self.self_attn = Attention(cfg, "causal" if causal else "bi", rng)
        self.ln_cross = LayerNorm(d, dt)
        self.cross_attn = Attention(cfg, "cross", rng)
        self.ln_ffn = LayerNorm(d, dt)
        self.ffn = FeedForward(cfg, rng)

    def __call__(self, x: Tensor, visual: Optional[Tensor],
                 prefix_kv=None, text_only: bool = False) -> Tensor:
        x = ag.add(x, self.self_attn(self.ln_self(x), prefix_kv=prefix_kv))
        if not text_only:
            x = ag.add(x, self.cross_attn(self.ln_cross(x), kv=visual))
        x = ag.add(x, self.ffn(self.ln_ffn(x)))
        return x

    def named(self, prefix: str):
        yield from self.ln_self.named(f"{prefix}/ln_self")
        yield from self.self_attn.named(f"{prefix}/self_attn")
        yield from self.ln_cross.named(f"{prefix}/ln_cross")
        yield from self.cross_attn.named(f"{prefix}/cross_attn")
        yield from self.ln_ffn.named(f"{prefix}/ln_ffn")
        yield from self.ffn.named(f"{prefix}/ffn")

    def attention_sites(self):
        yield "self", self.self_attn
        yield "cross", self.cross_attn


class _Component:
    """Shared bookkeeping for the three model components."""

    comp_id = ""

    def __init__(self):
        self.peft_prefix = None  # PrefixUnit or PTv2Unit once attached
        self.applied_mode = None

    def blocks_iter(self):
        return iter(self.blocks)

    def base_named_parameters(self):
        raise NotImplementedError

    def peft_named_parameters(self):
        for i, blk in enumerate(self.blocks):
            for site, attn in blk.attention_sites():
                for unit_name, unit in (("lora_q", attn.lora_q), ("lora_k", attn.lora_k)):
                    if unit is not None:
                        yield f"peft/{self.comp_id}/{i}/{site}_{unit_name}/a", unit.a
                        yield f"peft/{self.comp_id}/{i}/{site}_{unit_name}/b", unit.b
                if attn.ia3 is not None:
                    yield f"peft/{self.comp_id}/{i}/{site}_ia3/k", attn.ia3.l_k
                    yield f"peft/{self.comp_id}/{i}/{site}_ia3/v", attn.ia3.l_v
            if blk.ffn.ia3_ff is not None:
                yield f"peft/{self.comp_id}/{i}/ffn_ia3/ff", blk.ffn.ia3_ff
        if self.peft_prefix is not None:
            for pname, t in self.peft_prefix.named():
                yield f"peft/{self.comp_id}/shared/{pname}", t

    def named_parameters(self):
        yield from self.base_named_parameters()
        yield from self.peft_named_parameters()

    def _layer_prefix_kvs(self):
        if self.peft_prefix is None:
            return None
        return self.peft_prefix.layer_kv()


class ImageEncoder(_Component):
    """Patch projection + positional embeddings + vision blocks."""

    comp_id = "vit"

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        d, dt = cfg.hidden_dim, cfg.np_dtype
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        n_pos = cfg.n_patches + (1 if cfg.use_cls else 0)
        self.patch_w = _param(rng, (patch_dim, d), dt)
        self.patch_b = _param(None, (d,), dt, "zeros")
        self.cls = _param(rng, (1, d), dt) if cfg.use_cls else None
        self.pos = _param(rng, (n_pos, d), dt)
        self.blocks = [VisionBlock(cfg, rng) for _ in range(cfg.vit_layers)]
        self.ln_f = LayerNorm(d, dt)

    def __call__(self, pixels: np.ndarray) -> Tensor:
        cfg = self.cfg
        px = np.asarray(pixels, dtype=cfg.np_dtype)
        expect = (cfg.image_size, cfg.image_size, 3)
        if px.shape != expect:
            raise ShapeMismatchError(f"expected image {expect}, got {px.shape}")
        g = cfg.image_size // cfg.patch_size
        p = cfg.patch_size
        patches = px.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)
        x = ag.add(ag.matmul(Tensor(patches), self.patch_w), self.patch_b)
        if self.cls is not None:
            x = ag.concat([self.cls, x], axis=0)
        x = ag.add(x, ag.slice_axis(self.pos, 0, 0, x.shape[0]))
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)

    def base_named_parameters(self):
        yield "vit/patch_proj/w", self.patch_w
        yield "vit/patch_proj/b", self.patch_b
        if self.cls is not None:
            yield "vit/cls", self.cls
        yield "vit/pos", self.pos
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"vit/blocks/{i}")
        yield from self.ln_f.named("vit/ln_f")


class JointEncoder(_Component):
    """Text encoder whose every layer cross-attends into the visual stream."""

    comp_id = "jtm"

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        d, dt = cfg.hidden_dim, cfg.np_dtype
        self.tok_emb = _param(rng, (cfg.vocab_size, d), dt)
        self.pos = _param(rng, (cfg.max_text_len, d), dt)
        self.ln_emb = LayerNorm(d, dt)
        self.blocks = [FusionBlock(cfg, rng, causal=False) for _ in range(cfg.jtm_layers)]
        self.ln_f = LayerNorm(d, dt)

    def __call__(self, tokens, visual: Optional[Tensor], text_only: bool = False) -> Tensor:
        ids = list(tokens)
        if not ids:
            raise ConfigError("joint encoder needs at least one input token")
        if len(ids) > self.cfg.max_text_len:
            raise ConfigError(
                f"sequence of {len(ids)} tokens exceeds max_text_len={self.cfg.max_text_len}")
        x = ag.add(ag.embedding(self.tok_emb, ids), ag.slice_axis(self.pos, 0, 0, len(ids)))
        x = self.ln_emb(x)
        kvs = self._layer_prefix_kvs()
        for i, blk in enumerate(self.blocks):
            x = blk(x, visual, prefix_kv=None if kvs is None else kvs[i],
                    text_only=text_only)
        return self.ln_f(x)

    def base_named_parameters(self):
        yield "jtm/tok_emb", self.tok_emb
        yield "jtm/pos", self.pos
        yield from self.ln_emb.named("jtm/ln_emb")
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"jtm/blocks/{i}")
        yield from self.ln_f.named("jtm/ln_f")


class TextDecoder(_Component):
    """Causal decoder over answer tokens, cross-attending the fused stream."""

    comp_id = "dec"

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        d, dt = cfg.hidden_dim, cfg.np_dtype
        self.tok_emb = _param(rng, (cfg.vocab_size, d), dt)
        self.pos = _param(rng, (cfg.max_text_len, d), dt)
        self.ln_emb = LayerNorm(d, dt)
        self.blocks = [FusionBlock(cfg, rng, causal=True) for _ in range(cfg.dec_layers)]
        self.ln_f = LayerNorm(d, dt)
        # lm head reuses tok_emb when tied; otherwise its own projection
        self.lm_w = None if cfg.tie_lm_head else _param(rng, (d, cfg.vocab_size), dt)

    def __call__(self, fused: Tensor, tokens) -> Tensor:
        ids = list(tokens)
        if not ids:
            raise ConfigError("decoder needs at least one target token")
        if len(ids) > self.cfg.max_text_len:
            raise ConfigError(
                f"sequence of {len(ids)} tokens exceeds max_text_len={self.cfg.max_text_len}")
        x = ag.add(ag.embedding(self.tok_emb, ids), ag.slice_axis(self.pos, 0, 0, len(ids)))
        x = self.ln_emb(x)
        kvs = self._layer_prefix_kvs()
        for i, blk in enumerate(self.blocks):
            x = blk(x, fused, prefix_kv=None if kvs is None else kvs[i])
        x = self.ln_f(x)
        if self.lm_w is not None:
            return ag.matmul(x, self.lm_w)
        return ag.matmul(x, ag.transpose(self.tok_emb))

    def base_named_parameters(self):
        yield "dec/tok_emb", self.tok_emb
        yield "dec/pos", self.pos
        yield from self.ln_emb.named("dec/ln_emb")
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"dec/blocks/{i}")
        yield from self.ln_f.named("dec/ln_f")
        if self.lm_w is not None:
            yield "dec/lm_head/w", self.lm_w


class VLModel:
    """The assembled three-component model.

    Special token ids live at the top of the vocabulary so the same layout
    works for the byte tokenizer (vocab 260) and the tiny gradient-check
    vocabularies.
    """

    def __init__(self, cfg: ModelConfig, seed: Optional[int] = None):
        if cfg.vocab_size < 8:
            raise ConfigError("vocab_size must be at least 8 (4 specials + content)")
        rng = None if seed is None else np.random.default_rng(seed)
        self.cfg = cfg
        self.vit = ImageEncoder(cfg, rng)
        self.jtm = JointEncoder(cfg, rng)
        self.dec = TextDecoder(cfg, rng)
        self.applied_plan = None

    # special ids (match ByteTokenizer when vocab_size == 260)
    @property
    def pad_id(self):
        return self.cfg.vocab_size - 4

    @property
    def bos_id(self):
        return self.cfg.vocab_size - 3

    @property
    def eos_id(self):
        return self.cfg.vocab_size - 2

    @property
    def sep_id(self):
        return self.cfg.vocab_size - 1

    @property
    def components(self) -> dict:
        return {"vit": self.vit, "jtm": self.jtm, "dec": self.dec}

    def named_parameters(self):
        for comp in (self.vit, self.jtm, self.dec):
            yield from comp.named_parameters()

    def base_named_parameters(self):
        for comp in (self.vit, self.jtm, self.dec):
            yield from comp.base_named_parameters()

    def trainable_parameters(self):
        for name, t in self.named_parameters():
            if t.trainable:
                yield name, t

    # -- forward paths -------------------------------------------------------

    def encode_image(self, pixels) -> Tensor:
        return self.vit(pixels)

    def encode_jtm(self, tokens, visual: Tensor, text_only: bool = False) -> Tensor:
        return self.jtm(tokens, visual, text_only=text_only)

    def decode_text(self, fused: Tensor, target_tokens) -> Tensor:
        return self.dec(fused, target_tokens)

    def lm_loss(self, pixels, question_ids, answer_ids) -> Tensor:
        """Language-modeling loss over the answer tokens only."""
        visual = self.encode_image(pixels)
        fused = self.encode_jtm(question_ids, visual)
        dec_in = [self.bos_id] + list(answer_ids)
        targets = list(answer_ids) + [self.eos_id]
        logits = self.decode_text(fused, dec_in)
        return ag.lm_cross_entropy(logits, targets)

    def generate(self, pixels, question_ids, max_len: int = 32) -> list[int]:
        """Greedy decoding from BOS until EOS or ``max_len`` emitted tokens."""
        if max_len < 1:
            raise ConfigError("max_len must be >= 1")
        visual = self.encode_image(pixels)
        fused = self.encode_jtm(question_ids, visual)
        toks = [self.bos_id]
        out: list[int] = []
        while len(out) < max_len:
            logits = self.decode_text(fused, toks)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == self.eos_id:
                break
            out.append(nxt)
            toks.append(nxt)
            if len(toks) >= self.cfg.max_text_len:
                break
        return out


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> VLModel:
    """Instantiate the model; ``seed=None`` skips random init (counting mode)."""
    return VLModel(cfg, seed=seed)
