"""Straight-line, per-head numpy reference forward pass.

Deliberately independent of the package's autograd kernels: explicit loops
over heads and rows, no tape, no broadcasting tricks. Used as the oracle for
model forward checks. Works on the named-parameter dict of a model.
"""

import math

import numpy as np


def ln(x, g, b, eps=1e-6):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        row = x[i]
        mu = row.mean()
        var = ((row - mu) ** 2).mean()
        out[i] = (row - mu) / np.sqrt(var + eps) * g + b
    return out


def gelu(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def softmax_row(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def attention(x, kv, p, heads, causal=False):
    """p maps q/k/v/o weight names; kv is the key/value source sequence."""
    q = x @ p["wq"] + p["bq"]
    k = kv @ p["wk"] + p["bk"]
    v = kv @ p["wv"] + p["bv"]
    L, d = x.shape
    S = kv.shape[0]
    dk = d // heads
    out = np.zeros((L, d), dtype=x.dtype)
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        for i in range(L):
            scores = np.array([qh[i] @ kh[j] / math.sqrt(dk) for j in range(S)])
            if causal:
                for j in range(S):
                    if j > i:
                        scores[j] = -1e9
            w = softmax_row(scores)
            out[i, sl] = sum(w[j] * vh[j] for j in range(S))
    return out @ p["wo"] + p["bo"]


def _sub(params, prefix):
    plen = len(prefix)
    return {k[plen + 1:]: v for k, v in params.items() if k.startswith(prefix + "/")}


def image_encoder(pixels, params, cfg):
    g = cfg.image_size // cfg.patch_size
    ps = cfg.patch_size
    px = np.asarray(pixels, dtype=cfg.np_dtype)
    patches = np.zeros((g * g, ps * ps * 3), dtype=cfg.np_dtype)
    idx = 0
    for r in range(g):
        for c in range(g):
            block = px[r * ps:(r + 1) * ps, c * ps:(c + 1) * ps, :]
            patches[idx] = block.reshape(-1)
            idx += 1
    x = patches @ params["vit/patch_proj/w"] + params["vit/patch_proj/b"]
    if cfg.use_cls:
        x = np.vstack([params["vit/cls"], x])
    x = x + params["vit/pos"][: x.shape[0]]
    for i in range(cfg.vit_layers):
        p = _sub(params, f"vit/blocks/{i}")
        h = ln(x, p["ln1/g"], p["ln1/b"])
        x = x + attention(h, h, _sub(p, "attn"), cfg.num_heads)
        h = ln(x, p["ln2/g"], p["ln2/b"])
        x = x + (gelu(h @ p["ffn/w1"] + p["ffn/b1"]) @ p["ffn/w2"] + p["ffn/b2"])
    return ln(x, params["vit/ln_f/g"], params["vit/ln_f/b"])


def _fusion_stack(x, visual, params, comp, n_layers, heads, causal, text_only=False):
    for i in range(n_layers):
        p = _sub(params, f"{comp}/blocks/{i}")
        h = ln(x, p["ln_self/g"], p["ln_self/b"])
        x = x + attention(h, h, _sub(p, "self_attn"), heads, causal=causal)
        if not text_only:
            h = ln(x, p["ln_cross/g"], p["ln_cross/b"])
            x = x + attention(h, visual, _sub(p, "cross_attn"), heads)
        h = ln(x, p["ln_ffn/g"], p["ln_ffn/b"])
        x = x + (gelu(h @ p["ffn/w1"] + p["ffn/b1"]) @ p["ffn/w2"] + p["ffn/b2"])
    return x


def jtm_encoder(tokens, visual, params, cfg, text_only=False):
    ids = list(tokens)
    x = params["jtm/tok_emb"][ids] + params["jtm/pos"][: len(ids)]
    x = ln(x, params["jtm/ln_emb/g"], params["jtm/ln_emb/b"])
    x = _fusion_stack(x, visual, params, "jtm", cfg.jtm_layers, cfg.num_heads,
                      causal=False, text_only=text_only)
    return ln(x, params["jtm/ln_f/g"], params["jtm/ln_f/b"])


def decoder(fused, tokens, params, cfg):
    ids = list(tokens)
    x = params["dec/tok_emb"][ids] + params["dec/pos"][: len(ids)]
    x = ln(x, params["dec/ln_emb/g"], params["dec/ln_emb/b"])
    x = _fusion_stack(x, fused, params, "dec", cfg.dec_layers, cfg.num_heads,
                      causal=True)
    x = ln(x, params["dec/ln_f/g"], params["dec/ln_f/b"])
    if cfg.tie_lm_head:
        return x @ params["dec/tok_emb"].T
    return x @ params["dec/lm_head/w"]
