"""numpy-only inference forwards, bit-identical to the autodiff graph.

The training path encodes the moment-free prefix and continues moment tokens
over cached keys/values; here the same computation runs as one joint causal
pass, which is cheaper per call.  Equality of the two routes is asserted by
tests, so the rollout/profiling path and the training path cannot drift.

Every reduction that could differ between sequence lengths (the softmax
denominator) goes through matmul, matching `tensor.softmax_last_axis`.
"""

from __future__ import annotations

import numpy as np

from .backbone import BackboneConfig, TokenSequence
from .env import world
from .memory import MemoryConfig
from .tensor import _GELU_A, _GELU_C

_F = np.float32


def _row_mean(x):
    ones = np.ones(x.shape[-1], dtype=x.dtype)
    return (np.matmul(x, ones) / x.shape[-1])[..., None]


def _ln(x, g, b, eps):
    mu = _row_mean(x)
    centered = x - mu
    var = _row_mean(centered * centered)
    inv = 1.0 / np.sqrt(var + eps)
    return (centered * inv) * g + b


def _gelu(x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    return 0.5 * x * (1.0 + t)


def _softmax_masked(x):
    # no row is ever fully masked, so max is finite and exp(-inf) lands on 0
    # exactly; values match tensor.softmax_last_axis bit for bit
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    denom = np.matmul(e, np.ones((e.shape[-1], 1), dtype=e.dtype))
    return (e / denom).astype(x.dtype)


def _proj(x, w):
    # (B, S, d) @ (d, k) via one 2D GEMM; per-row dots are unchanged
    b, s, d = x.shape
    return (x.reshape(b * s, d) @ w).reshape(b, s, -1)



def _layer_arrays(reg, prefix: str, n_layers: int):
    """Per-layer raw-array tuples, cached on the registry (parameter updates
    mutate arrays in place, so references stay current)."""
    key = ("layers", prefix, n_layers)
    got = reg.cache.get(key)
    if got is None:
        layers = []
        for i in range(n_layers):
            p = f"{prefix}.layers.{i}."
            layers.append(tuple(reg[p + n].data for n in (
                "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b",
                "ff_w1", "ff_b1", "ff_w2", "ff_b2")))
        final = (reg[f"{prefix}.ln_f_g"].data, reg[f"{prefix}.ln_f_b"].data)
        got = (layers, final)
        reg.cache[key] = got
    return got


_CAUSAL_CACHE: dict[int, np.ndarray] = {}


def _causal(s: int) -> np.ndarray:
    m = _CAUSAL_CACHE.get(s)
    if m is None:
        m = np.zeros((s, s), dtype=_F)
        m[np.triu_indices(s, k=1)] = -np.inf
        _CAUSAL_CACHE[s] = m
    return m


def _embed_prefix_fast(seqs: list[TokenSequence], reg, cfg: BackboneConfig):
    b = len(seqs)
    li = len(seqs[0].instruction)
    f = seqs[0].frames.shape[0]
    parts = []
    if li:
        ids = np.stack([s.instruction for s in seqs])
        parts.append(reg["backbone.instr_emb"].data[ids]
                     + reg["backbone.instr_pos"].data[np.arange(li)])
    cell_ids = np.stack([s.frames.reshape(-1) for s in seqs])
    cells = reg["backbone.cell_emb"].data[cell_ids]
    idx = np.arange(cfg.n_cells)
    pos = (reg["backbone.row_emb"].data[np.tile(idx // world.WIDTH, f)]
           + reg["backbone.col_emb"].data[np.tile(idx % world.WIDTH, f)])
    cells = cells + pos
    if f > 1:
        fidx = np.repeat(np.arange(f), cfg.n_cells)
        cells = cells + reg["backbone.frame_emb"].data[fidx]
    parts.append(cells)
    parts.append(np.broadcast_to(reg["backbone.readout_emb"].data[0],
                                 (b, 1, cfg.d_model)))
    return np.concatenate(parts, axis=1)


_MOMENT_MASK_CACHE: dict[tuple, np.ndarray] = {}


def _moment_mask(n_m: int, s_pre: int) -> np.ndarray:
    key = (n_m, s_pre)
    m = _MOMENT_MASK_CACHE.get(key)
    if m is None:
        m = np.zeros((n_m, s_pre + n_m), dtype=_F)
        r, c = np.triu_indices(n_m, k=1)
        m[r, s_pre + c] = -np.inf
        _MOMENT_MASK_CACHE[key] = m
    return m


def encode_fast(seqs: list[TokenSequence], reg, cfg: BackboneConfig,
                moments: np.ndarray | None = None, capture_attention=False):
    """Moment-free prefix pass plus an incremental moment continuation over
    the prefix's cached keys/values, mirroring the training path so the
    readout state is bit-identical with or without moment tokens.

    Returns (h, m_prime, per-layer moment attention maps or [])."""
    if any(s.jitter_sigma > 0 for s in seqs):
        raise ValueError("jittered views run through the training path")
    b = len(seqs)
    s = seqs[0].prefix_length
    x = _embed_prefix_fast(seqs, reg, cfg)
    mask = _causal(s)
    heads, dh = cfg.heads, cfg.d_head
    scale = np.float32(1.0 / np.sqrt(dh))
    layers, final = _layer_arrays(reg, "backbone", cfg.layers)
    kv_cache = []
    for lp in layers:
        ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2 = lp
        xn = _ln(x, ln1_g, ln1_b, cfg.ln_eps)
        q = _proj(xn, wq).reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
        k = _proj(xn, wk).reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
        v = _proj(xn, wv).reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
        probs = _softmax_masked(np.matmul(q, k.swapaxes(-1, -2)) * scale + mask)
        ctx = np.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, s, cfg.d_model)
        x = x + _proj(ctx, wo)
        xn2 = _ln(x, ln2_g, ln2_b, cfg.ln_eps)
        h1 = np.maximum(_proj(xn2, w1) + b1, 0)
        x = x + (_proj(h1, w2) + b2)
        if moments is not None:
            kv_cache.append((k, v))
    y = _ln(x, final[0], final[1], cfg.ln_eps)
    h = y[:, s - 1]
    if moments is None:
        return h, None, []

    n_m = moments.shape[0]
    xm = np.broadcast_to(moments, (b,) + moments.shape)
    m_mask = _moment_mask(n_m, s)
    attn_maps = []
    for lp, (k_pre, v_pre) in zip(layers, kv_cache):
        ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2 = lp
        xn = _ln(xm, ln1_g, ln1_b, cfg.ln_eps)
        qm = _proj(xn, wq).reshape(b, n_m, heads, dh).transpose(0, 2, 1, 3)
        km = _proj(xn, wk).reshape(b, n_m, heads, dh).transpose(0, 2, 1, 3)
        vm = _proj(xn, wv).reshape(b, n_m, heads, dh).transpose(0, 2, 1, 3)
        k_all = np.concatenate([k_pre, km], axis=-2)
        v_all = np.concatenate([v_pre, vm], axis=-2)
        probs = _softmax_masked(np.matmul(qm, k_all.swapaxes(-1, -2)) * scale + m_mask)
        if capture_attention:
            attn_maps.append(probs.copy())
        ctx = np.matmul(probs, v_all).transpose(0, 2, 1, 3).reshape(b, n_m, cfg.d_model)
        xm = xm + _proj(ctx, wo)
        xn2 = _ln(xm, ln2_g, ln2_b, cfg.ln_eps)
        h1 = np.maximum(_proj(xn2, w1) + b1, 0)
        xm = xm + (_proj(h1, w2) + b2)
    m_prime = _ln(xm, final[0], final[1], cfg.ln_eps)
    return h, m_prime, attn_maps


_MEM_MASK_CACHE: dict[tuple, np.ndarray] = {}


def _memory_mask_fast(n_real: int, cfg: MemoryConfig) -> np.ndarray:
    key = (cfg.history, cfg.n_m, n_real)
    m = _MEM_MASK_CACHE.get(key)
    if m is None:
        rows = cfg.rows
        i = np.arange(rows)
        m = np.where(i[None, :] > i[:, None], -np.inf, 0.0)
        n_pad_rows = (cfg.history - n_real) * cfg.n_m
        pad_col = (i[None, :] < n_pad_rows) & (i[:, None] != i[None, :])
        m = np.where(pad_col, -np.inf, m).astype(_F)
        _MEM_MASK_CACHE[key] = m
    return m


def assemble_history_fast(slots: np.ndarray, n_real: int, reg, cfg: MemoryConfig):
    b = slots.shape[0]
    base = slots.reshape(b, cfg.rows, cfg.d_model).astype(_F)
    n_pad_rows = (cfg.history - n_real) * cfg.n_m
    row_pad = np.zeros((cfg.rows, 1), dtype=_F)
    row_pad[:n_pad_rows] = 1.0
    pad_rows = np.broadcast_to(reg["memory.pad_emb"].data[0], (cfg.rows, cfg.d_model))
    m = base * (1.0 - row_pad) + pad_rows * row_pad
    slot_ids = np.repeat(np.arange(cfg.history), cfg.n_m)
    return m + reg["memory.slot_emb"].data[slot_ids]


def consolidate_fast(history: np.ndarray, n_real: int, reg, cfg: MemoryConfig,
                     capture_attention=False):
    mask = _memory_mask_fast(n_real, cfg)
    inv_sqrt_d = np.float32(1.0 / np.sqrt(cfg.d_model))
    x = history
    attn_maps = []
    layers, final = _layer_arrays(reg, "memory", cfg.layers)
    for lp in layers:
        ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2 = lp
        xn = _ln(x, ln1_g, ln1_b, cfg.ln_eps)
        q = _proj(xn, wq)
        k = _proj(xn, wk)
        v = _proj(xn, wv)
        probs = _softmax_masked(np.matmul(q, k.swapaxes(-1, -2)) * inv_sqrt_d + mask)
        if capture_attention:
            attn_maps.append(probs.copy())
        x = x + _proj(np.matmul(probs, v), wo)
        xn2 = _ln(x, ln2_g, ln2_b, cfg.ln_eps)
        h1 = np.maximum(_proj(xn2, w1) + b1, 0)
        x = x + (_proj(h1, w2) + b2)
    y = _ln(x, final[0], final[1], cfg.ln_eps)
    return y[:, cfg.rows - cfg.n_m:], attn_maps


def recurrent_history_fast(slots: np.ndarray, n_real: int, reg, kind: str,
                           cfg: MemoryConfig) -> np.ndarray:
    b = slots.shape[0]
    d = cfg.d_model
    h = np.zeros((b, d), dtype=_F)
    c = np.zeros((b, d), dtype=_F)
    w_ih, w_hh = reg["memory.cell_w_ih"].data, reg["memory.cell_w_hh"].data
    bias = reg["memory.cell_b"].data
    start = cfg.history - n_real
    for j in range(start, cfg.history):
        x = slots[:, j].mean(axis=1)
        if kind == "rnn":
            h = np.tanh(x @ w_ih + h @ w_hh + bias)
        elif kind == "gru":
            gates = x @ w_ih + h @ w_hh + bias
            z = _sig(gates[..., :d])
            r = _sig(gates[..., d:2 * d])
            n = np.tanh((x @ w_ih + bias)[..., 2 * d:] + r * (h @ w_hh)[..., 2 * d:])
            h = (1.0 - z) * h + z * n
        else:
            gates = x @ w_ih + h @ w_hh + bias
            i_g = _sig(gates[..., :d])
            f_g = _sig(gates[..., d:2 * d])
            g_g = np.tanh(gates[..., 2 * d:3 * d])
            o_g = _sig(gates[..., 3 * d:])
            c = f_g * c + i_g * g_g
            h = o_g * np.tanh(c)
    return np.tile(h, (1, cfg.n_m))


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def expert_fast(h: np.ndarray, hist: np.ndarray | None, proprio, reg, k: int):
    b, d_model = h.shape
    hw = reg["expert.w_in"].shape[0] - d_model - 16
    if hist is None:
        hist = np.zeros((b, hw), dtype=h.dtype)
    else:
        hist = hist.reshape(b, -1)
    prop = np.asarray(proprio, dtype=h.dtype).reshape(b, 3)
    p_emb = prop @ reg["expert.w_prop"].data + reg["expert.b_prop"].data
    x = np.concatenate([h, hist, p_emb], axis=-1)
    z = _gelu(x @ reg["expert.w_in"].data + reg["expert.b_in"].data)
    z = _gelu(z @ reg["expert.w_h1"].data + reg["expert.b_h1"].data)
    z = _gelu(z @ reg["expert.w_h2"].data + reg["expert.b_h2"].data)
    logits = z @ reg["expert.w_out"].data + reg["expert.b_out"].data
    return logits.reshape(b, k, world.N_ACTIONS)
