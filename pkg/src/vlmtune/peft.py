"""Attachable parameter-efficient fine-tuning units.

Four mechanisms, all exact identities at attach time:

* LoRA: low-rank factors on the query and key projections of every
  attention site (self, causal, and cross alike); B starts at zero.
* IA3: learned rescaling vectors on attention keys/values and on the
  feed-forward inner activation; all initialized to ones.
* Prefix: per-layer key/value prefixes produced from a small embedding
  table through a two-layer reparameterization MLP.
* PTv2: per-layer key/value prefixes sliced out of one shared trainable
  matrix, with no reparameterization network.

Prefix-style units attach at self-attention sites only; cross-attention
keys/values belong to the visual stream and are never prepended to.
"""

from __future__ import annotations

import warnings
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import AttachError, ConfigError
from .model import INIT_STD, _Component

DEFAULT_PREFIX_LEN = 16
DEFAULT_PREFIX_HIDDEN = 512


class LoRAUnit:
    """Low-rank delta B(Ax) added to one projection; identity while B = 0."""

    def __init__(self, dim: int, rank: int, dtype, rng):
        if rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        self.rank = rank
        a = np.zeros((dim, rank), dtype=dtype) if rng is None else \
            ag.trunc_normal(rng, (dim, rank), INIT_STD, dtype)
        self.a = Tensor(a, trainable=True)
        self.b = Tensor(np.zeros((rank, dim), dtype=dtype), trainable=True)

    def delta(self, x: Tensor) -> Tensor:
        return ag.matmul(ag.matmul(x, self.a), self.b)

    def merge_into(self, w: Tensor):
        w.data += self.a.data @ self.b.data

    @property
    def param_count(self) -> int:
        return self.a.size + self.b.size


class IA3AttnUnit:
    """Elementwise key/value rescaling vectors for one attention site."""

    def __init__(self, dim: int, dtype):
        self.l_k = Tensor(np.ones(dim, dtype=dtype), trainable=True)
        self.l_v = Tensor(np.ones(dim, dtype=dtype), trainable=True)


class PrefixUnit:
    """Reparameterized prefixes: table [P, d] -> MLP -> per-layer K/V pairs."""

    kind = "prefix"

    def __init__(self, cfg, num_layers: int, prefix_len: int, hidden: int, rng):
        d, dt = cfg.hidden_dim, cfg.np_dtype
        self.prefix_len = prefix_len
        self.num_layers = num_layers
        self.hidden = hidden
        self.table = Tensor(_init(rng, (prefix_len, d), dt), trainable=True)
        self.w1 = Tensor(_init(rng, (d, hidden), dt), trainable=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=dt), trainable=True)
        self.w2 = Tensor(_init(rng, (hidden, num_layers * 2 * d), dt), trainable=True)
        self.b2 = Tensor(np.zeros(num_layers * 2 * d, dtype=dt), trainable=True)
        self._d = d

    def layer_kv(self) -> list[tuple[Tensor, Tensor]]:
        if self.prefix_len == 0:
            empty = Tensor(np.zeros((0, self._d), dtype=self.table.dtype))
            return [(empty, empty)] * self.num_layers
        h = ag.gelu(ag.add(ag.matmul(self.table, self.w1), self.b1))
        flat = ag.add(ag.matmul(h, self.w2), self.b2)  # [P, L*2*d]
        out = []
        for i in range(self.num_layers):
            base = i * 2 * self._d
            pk = ag.slice_axis(flat, 1, base, base + self._d)
            pv = ag.slice_axis(flat, 1, base + self._d, base + 2 * self._d)
            out.append((pk, pv))
        return out

    def named(self):
        yield "prefix/table", self.table
        yield "prefix/w1", self.w1
        yield "prefix/b1", self.b1
        yield "prefix/w2", self.w2
        yield "prefix/b2", self.b2

    @property
    def param_count(self) -> int:
        return sum(t.size for _, t in self.named())


class PTv2Unit:
    """Per-layer prefixes sliced from a single shared trainable matrix."""

    kind = "ptv2"

    def __init__(self, cfg, num_layers: int, prefix_len: int, rng):
        d, dt = cfg.hidden_dim, cfg.np_dtype
        self.prefix_len = prefix_len
        self.num_layers = num_layers
        self.table = Tensor(_init(rng, (prefix_len, num_layers * 2 * d), dt), trainable=True)
        self._d = d

    def layer_kv(self) -> list[tuple[Tensor, Tensor]]:
        if self.prefix_len == 0:
            empty = Tensor(np.zeros((0, self._d), dtype=self.table.dtype))
            return [(empty, empty)] * self.num_layers
        out = []
        for i in range(self.num_layers):
            base = i * 2 * self._d
            pk = ag.slice_axis(self.table, 1, base, base + self._d)
            pv = ag.slice_axis(self.table, 1, base + self._d, base + 2 * self._d)
            out.append((pk, pv))
        return out

    def named(self):
        yield "ptv2/table", self.table

    @property
    def param_count(self) -> int:
        return self.table.size


def _init(rng, shape, dtype):
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    return ag.trunc_normal(rng, shape, INIT_STD, dtype)


# ---------------------------------------------------------------------------
# Attach / detach / merge
# ---------------------------------------------------------------------------

def _attention_sites(component: _Component):
    for blk in component.blocks_iter():
        yield from blk.attention_sites()


def attach_lora(component: _Component, rank: int,
                rng: Optional[np.random.Generator] = None):
    """Put LoRA units on the query and key projections of every attention site."""
    for _, attn in _attention_sites(component):
        if attn.lora_q is not None or attn.lora_k is not None:
            raise AttachError(f"LoRA already attached to component {component.comp_id!r}")
    cfg = component.cfg
    for _, attn in _attention_sites(component):
        attn.lora_q = LoRAUnit(cfg.hidden_dim, rank, cfg.np_dtype, rng)
        attn.lora_k = LoRAUnit(cfg.hidden_dim, rank, cfg.np_dtype, rng)
    return component


def merge_lora(component: _Component):
    """Fold every LoRA delta into its base weight and drop the units."""
    units = [(attn, attn.lora_q, attn.lora_k) for _, attn in _attention_sites(component)
             if attn.lora_q is not None or attn.lora_k is not None]
    if not units:
        warnings.warn(f"no LoRA units attached to {component.comp_id!r}; merge is a no-op")
        return component
    for attn, lq, lk in units:
        if lq is not None:
            lq.merge_into(attn.wq)
            attn.lora_q = None
        if lk is not None:
            lk.merge_into(attn.wk)
            attn.lora_k = None
    return component


def attach_ia3(component: _Component, sites: str = "all"):
    """Attach rescaling vectors at attention and feed-forward sites.

    ``sites`` selects the attention coverage: ``all`` (self and cross, the
    documented formula) or ``self_only``. The published fractions for this
    adapter are ambiguous about cross-attention, so the accountant keeps the
    selection explicit.
    """
    if sites not in ("all", "self_only"):
        raise ConfigError(f"unknown IA3 site selection {sites!r}")
    for _, attn in _attention_sites(component):
        if attn.ia3 is not None:
            raise AttachError(f"IA3 already attached to component {component.comp_id!r}")
    cfg = component.cfg
    for site, attn in _attention_sites(component):
        if sites == "self_only" and site == "cross":
            continue
        attn.ia3 = IA3AttnUnit(cfg.hidden_dim, cfg.np_dtype)
    for blk in component.blocks_iter():
        blk.ffn.ia3_ff = Tensor(np.ones(cfg.ffn_dim, dtype=cfg.np_dtype), trainable=True)
    return component


def attach_prefix(component: _Component, prefix_len: int = DEFAULT_PREFIX_LEN,
                  hidden: int = DEFAULT_PREFIX_HIDDEN,
                  rng: Optional[np.random.Generator] = None):
    """Attach reparameterized key/value prefixes at every self-attention site."""
    _check_prefix_target(component, prefix_len)
    component.peft_prefix = PrefixUnit(component.cfg, len(component.blocks),
                                       prefix_len, hidden, rng)
    return component


def attach_ptv2(component: _Component, prefix_len: int,
                rng: Optional[np.random.Generator] = None):
    """Attach shared-matrix prefixes at every self-attention site."""
    _check_prefix_target(component, prefix_len)
    component.peft_prefix = PTv2Unit(component.cfg, len(component.blocks),
                                     prefix_len, rng)
    return component


def _check_prefix_target(component: _Component, prefix_len: int):
    if prefix_len < 0:
        raise ConfigError("prefix length must be >= 0")
    if component.comp_id == "vit":
        raise AttachError("prefix-style adapters are not offered on the image encoder")
    if component.peft_prefix is not None:
        raise AttachError(f"prefix unit already attached to {component.comp_id!r}")
    budget = component.cfg.attn_budget
    if prefix_len + component.cfg.max_text_len > budget:
        raise ConfigError(
            f"prefix length {prefix_len} plus max_text_len "
            f"{component.cfg.max_text_len} exceeds attention budget {budget}")


def detach_adapters(component: _Component):
    """Remove every attached unit, restoring the base forward path."""
    for _, attn in _attention_sites(component):
        attn.lora_q = None
        attn.lora_k = None
        attn.ia3 = None
    for blk in component.blocks_iter():
        blk.ffn.ia3_ff = None
    component.peft_prefix = None
    return component


def peft_param_count(component: _Component) -> int:
    return sum(t.size for _, t in component.peft_named_parameters())


# ---------------------------------------------------------------------------
# Closed-form counting oracles (kept separate from the live enumeration so
# tests can cross-check one against the other)
# ---------------------------------------------------------------------------

def lora_count(cfg, n_attention_sites: int, rank: int) -> int:
    return n_attention_sites * 2 * (2 * cfg.hidden_dim * rank)


def ia3_count(cfg, n_attention_sites: int, n_ffn_sites: int) -> int:
    return n_attention_sites * 2 * cfg.hidden_dim + n_ffn_sites * cfg.ffn_dim


def prefix_count(cfg, num_layers: int, prefix_len: int, hidden: int) -> int:
    d = cfg.hidden_dim
    out = num_layers * 2 * d
    return prefix_len * d + (d * hidden + hidden) + (hidden * out + out)


def ptv2_count(cfg, num_layers: int, prefix_len: int) -> int:
    return prefix_len * num_layers * 2 * cfg.hidden_dim
