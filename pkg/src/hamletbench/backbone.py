"""Causal transformer encoder over [instruction; observation; readout; moment]
token sequences, plus single-frame behavioral-cloning pretraining.

The readout state is computed from the moment-free prefix and moment tokens
are run as an incremental continuation over the prefix's cached keys/values.
That is mathematically identical to one joint causal pass (earlier positions
cannot attend to moment slots) and makes the readout state bit-identical
whether or not moment tokens are appended.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .env import world
from .optim import ParamRegistry
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 4
    ff: int = 256
    cell_vocab: int = world.OBS_VOCAB_SIZE
    instr_vocab: int = world.INSTR_VOCAB_SIZE
    max_instr_len: int = world.MAX_INSTR_LEN
    n_cells: int = world.WIDTH * world.HEIGHT
    max_frames: int = 8
    max_seq: int = 512
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")

    @property
    def d_head(self):
        return self.d_model // self.heads


@dataclass
class TokenSequence:
    """Ids plus segment layout for one backbone input."""

    instruction: np.ndarray          # (Li,) int
    frames: np.ndarray               # (F, n_cells) int, oldest first
    with_moment: bool = False
    n_moment: int = 0
    jitter_sigma: float = 0.0        # embed-time Gaussian offset on cell tokens
    jitter_seed: int = 0

    @property
    def prefix_length(self):
        return len(self.instruction) + self.frames.size + 1

    @property
    def length(self):
        return self.prefix_length + (self.n_moment if self.with_moment else 0)

    def segments(self):
        li, nc = len(self.instruction), self.frames.size
        labels = ["INSTRUCTION"] * li + ["OBSERVATION"] * nc + ["READOUT"]
        if self.with_moment:
            labels += ["MOMENT"] * self.n_moment
        return labels


def tokenize(obs, instruction, cfg: BackboneConfig, with_moment=False,
             n_moment=0, frame_stack=None, jitter_sigma=0.0, jitter_seed=0) -> TokenSequence:
    """Lay out one input sequence; multi-frame stacks go oldest first."""
    obs = np.asarray(obs, dtype=np.int64).reshape(-1)
    if frame_stack is not None:
        frames = np.stack([np.asarray(f, dtype=np.int64).reshape(-1)
                           for f in frame_stack] + [obs])
    else:
        frames = obs[None, :]
    if frames.shape[0] > cfg.max_frames:
        raise ValueError(f"frame stack of {frames.shape[0]} exceeds max_frames={cfg.max_frames}")
    if len(instruction) > cfg.max_instr_len:
        raise ValueError(f"instruction of {len(instruction)} tokens exceeds {cfg.max_instr_len}")
    seq = TokenSequence(instruction=np.asarray(instruction, dtype=np.int64),
                        frames=frames, with_moment=with_moment,
                        n_moment=n_moment if with_moment else 0,
                        jitter_sigma=jitter_sigma, jitter_seed=jitter_seed)
    if seq.length > cfg.max_seq:
        raise ValueError(f"sequence of {seq.length} tokens exceeds max_seq={cfg.max_seq}")
    return seq


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_backbone_params(reg: ParamRegistry, cfg: BackboneConfig, rng: np.random.Generator):
    d, ff = cfg.d_model, cfg.ff
    u = lambda shape, fan: T.uniform_init(rng, shape, fan)
    reg.add("backbone.cell_emb", u((cfg.cell_vocab, d), d))
    reg.add("backbone.row_emb", u((world.HEIGHT, d), d))
    reg.add("backbone.col_emb", u((world.WIDTH, d), d))
    reg.add("backbone.instr_emb", u((cfg.instr_vocab, d), d))
    reg.add("backbone.instr_pos", u((cfg.max_instr_len, d), d))
    reg.add("backbone.readout_emb", u((1, d), d))
    reg.add("backbone.frame_emb", u((cfg.max_frames, d), d))
    for i in range(cfg.layers):
        p = f"backbone.layers.{i}."
        reg.add(p + "ln1_g", np.ones(d, dtype=T.DEFAULT_DTYPE))
        reg.add(p + "ln1_b", T.zeros(d))
        for w in ("wq", "wk", "wv", "wo"):
            reg.add(p + w, u((d, d), d))
        reg.add(p + "ln2_g", np.ones(d, dtype=T.DEFAULT_DTYPE))
        reg.add(p + "ln2_b", T.zeros(d))
        reg.add(p + "ff_w1", u((d, ff), d))
        reg.add(p + "ff_b1", T.zeros(ff))
        reg.add(p + "ff_w2", u((ff, d), ff))
        reg.add(p + "ff_b2", T.zeros(d))
    reg.add("backbone.ln_f_g", np.ones(d, dtype=T.DEFAULT_DTYPE))
    reg.add("backbone.ln_f_b", T.zeros(d))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class BackboneOutput:
    h: Tensor                      # (B, d) readout state
    m_prime: Tensor | None = None  # (B, n_m, d) moment outputs
    moment_attention: list = field(default_factory=list)  # per layer (B, heads, n_m, S)
    prefix_attention: list = field(default_factory=list)  # per layer (B, heads, S, S)


def _split_heads(x: Tensor, b, s, heads, dh):
    return T.transpose(T.reshape(x, (b, s, heads, dh)), (0, 2, 1, 3))


def _merge_heads(x: Tensor, b, s, d):
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, s, d))


def _attention(xn: Tensor, reg, p, cfg, mask: Tensor, kv=None, capture=None):
    """Pre-norm MHA; with ``kv`` the queries attend over cached keys/values
    prepended to their own."""
    b, s, d = xn.shape
    q = _split_heads(T.matmul(xn, reg[p + "wq"]), b, s, cfg.heads, cfg.d_head)
    k = _split_heads(T.matmul(xn, reg[p + "wk"]), b, s, cfg.heads, cfg.d_head)
    v = _split_heads(T.matmul(xn, reg[p + "wv"]), b, s, cfg.heads, cfg.d_head)
    if kv is not None:
        k = T.concat_rows([kv[0], k])
        v = T.concat_rows([kv[1], v])
    logits = T.scale(T.matmul(q, T.swap_last2(k)), 1.0 / math.sqrt(cfg.d_head))
    probs = T.softmax_last_axis(T.add(logits, mask))
    if capture is not None:
        capture.append(probs.data.copy())
    ctx = _merge_heads(T.matmul(probs, v), b, s, d)
    return T.matmul(ctx, reg[p + "wo"]), (k, v)


def _ff(xn: Tensor, reg, p):
    # relu keeps the wide hidden activation cheap on CPU
    h = T.relu(T.add(T.matmul(xn, reg[p + "ff_w1"]), reg[p + "ff_b1"]))
    return T.add(T.matmul(h, reg[p + "ff_w2"]), reg[p + "ff_b2"])


def transformer_stack(x: Tensor, reg, prefix: str, cfg, mask: Tensor,
                      capture=None, collect_kv=False):
    """Pre-norm causal stack; returns (final-normed output, per-layer (k, v))."""
    kv_cache = []
    for i in range(cfg.layers):
        p = f"{prefix}.layers.{i}."
        xn = T.layer_norm(x, reg[p + "ln1_g"], reg[p + "ln1_b"], cfg.ln_eps)
        attn_out, kv = _attention(xn, reg, p, cfg, mask, capture=capture)
        if collect_kv:
            kv_cache.append(kv)
        x = T.add(x, attn_out)
        xn2 = T.layer_norm(x, reg[p + "ln2_g"], reg[p + "ln2_b"], cfg.ln_eps)
        x = T.add(x, _ff(xn2, reg, p))
    y = T.layer_norm(x, reg[f"{prefix}.ln_f_g"], reg[f"{prefix}.ln_f_b"], cfg.ln_eps)
    return y, kv_cache


_NEG = np.float32(-np.inf)


def causal_mask(s: int) -> Tensor:
    m = np.zeros((s, s), dtype=T.DEFAULT_DTYPE)
    m[np.triu_indices(s, k=1)] = _NEG
    return Tensor(m)


def _embed_prefix(seqs: list[TokenSequence], reg, cfg) -> Tensor:
    b = len(seqs)
    li = len(seqs[0].instruction)
    f = seqs[0].frames.shape[0]
    instr_ids = np.stack([s.instruction for s in seqs])
    cell_ids = np.stack([s.frames.reshape(-1) for s in seqs])

    parts = []
    if li:
        instr = T.add(T.embedding_gather(reg["backbone.instr_emb"], instr_ids),
                      T.embedding_gather(reg["backbone.instr_pos"], np.arange(li)))
        parts.append(instr)

    cells = T.embedding_gather(reg["backbone.cell_emb"], cell_ids)
    idx = np.arange(cfg.n_cells)
    pos = T.add(T.embedding_gather(reg["backbone.row_emb"], np.tile(idx // world.WIDTH, f)),
                T.embedding_gather(reg["backbone.col_emb"], np.tile(idx % world.WIDTH, f)))
    cells = T.add(cells, pos)
    if f > 1:
        fidx = np.repeat(np.arange(f), cfg.n_cells)
        cells = T.add(cells, T.embedding_gather(reg["backbone.frame_emb"], fidx))
    if any(s.jitter_sigma > 0 for s in seqs):
        noise = np.zeros((b, f * cfg.n_cells, cfg.d_model), dtype=T.DEFAULT_DTYPE)
        for j, s in enumerate(seqs):
            if s.jitter_sigma > 0:
                g = np.random.Generator(np.random.PCG64(s.jitter_seed))
                noise[j] = s.jitter_sigma * g.standard_normal(noise.shape[1:])
        cells = T.add(cells, Tensor(noise))
    parts.append(cells)

    readout = T.embedding_gather(reg["backbone.readout_emb"],
                                 np.zeros((b, 1), dtype=np.int64))
    parts.append(readout)
    return T.concat_rows(parts)


def encode(seqs: list[TokenSequence], reg: ParamRegistry, cfg: BackboneConfig,
           moments: Tensor | None = None, capture_attention=False) -> BackboneOutput:
    """Batched encode; every sequence in the batch must share a layout."""
    shapes = {(len(s.instruction), s.frames.shape[0], s.with_moment, s.n_moment)
              for s in seqs}
    if len(shapes) != 1:
        raise ValueError(f"mixed sequence layouts in one batch: {sorted(shapes)}")
    if seqs[0].with_moment != (moments is not None):
        raise ValueError("moment embeddings required iff the sequence has MOMENT slots")
    b = len(seqs)
    s_pre = seqs[0].prefix_length

    x = _embed_prefix(seqs, reg, cfg)
    cap_pre = [] if capture_attention else None
    y, kv_cache = transformer_stack(x, reg, "backbone", cfg, causal_mask(s_pre),
                                    capture=cap_pre, collect_kv=moments is not None)
    h = T.reshape(T.slice_rows(y, s_pre - 1, s_pre), (b, cfg.d_model))
    out = BackboneOutput(h=h, prefix_attention=cap_pre or [])

    if moments is not None:
        n_m = moments.shape[0]
        xm = T.embedding_gather(moments, np.tile(np.arange(n_m), (b, 1)))
        mask = np.zeros((n_m, s_pre + n_m), dtype=T.DEFAULT_DTYPE)
        block = np.triu_indices(n_m, k=1)
        mask[block[0], s_pre + block[1]] = _NEG
        mask_t = Tensor(mask)
        cap = [] if capture_attention else None
        for i in range(cfg.layers):
            p = f"backbone.layers.{i}."
            xn = T.layer_norm(xm, reg[p + "ln1_g"], reg[p + "ln1_b"], cfg.ln_eps)
            attn_out, _ = _attention(xn, reg, p, cfg, mask_t, kv=kv_cache[i], capture=cap)
            xm = T.add(xm, attn_out)
            xn2 = T.layer_norm(xm, reg[p + "ln2_g"], reg[p + "ln2_b"], cfg.ln_eps)
            xm = T.add(xm, _ff(xn2, reg, p))
        out.m_prime = T.layer_norm(xm, reg["backbone.ln_f_g"], reg["backbone.ln_f_b"],
                                   cfg.ln_eps)
        out.moment_attention = cap or []
    return out
