"""History ring buffer and the causal-attention memory module.

The buffer keeps the most recent T per-timestep moment outputs; stacking them
yields the L x d history matrix (L = T * n_m) with learned PAD rows filling
missing slots at episode start.  The memory module is a 2-layer pre-norm
transformer whose attention mask is causal over rows and additionally blocks
padded key columns for every query (the diagonal stays open, so no query is
ever fully masked).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import _ff
from .optim import ParamRegistry
from .tensor import Tensor


class MemoryBuffer:
    """Bounded ring of (timestep, m') entries, oldest to newest."""

    def __init__(self, capacity: int, chunk: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.chunk = chunk
        self.entries: list[tuple[int, np.ndarray]] = []

    def __len__(self):
        return len(self.entries)

    def push(self, m_prime: np.ndarray, timestep: int):
        if self.entries and timestep != self.entries[-1][0] + self.chunk:
            raise ValueError(
                f"out-of-order push: expected timestep {self.entries[-1][0] + self.chunk}, "
                f"got {timestep}")
        self.entries.append((timestep, np.asarray(m_prime)))
        if len(self.entries) > self.capacity:
            self.entries.pop(0)
        return self


def stack_history(buf: MemoryBuffer):
    """(T, n_m, d) slot array plus per-slot pad flags; newest entry is last.

    Missing leading slots are zero-filled here and replaced by the learned PAD
    embedding inside :func:`assemble_history`.
    """
    if not buf.entries:
        raise ValueError("stack_history on an empty buffer")
    n_m, d = buf.entries[0][1].shape
    slots = np.zeros((buf.capacity, n_m, d), dtype=buf.entries[0][1].dtype)
    pad = np.ones(buf.capacity, dtype=bool)
    offset = buf.capacity - len(buf.entries)
    for i, (_, m) in enumerate(buf.entries):
        slots[offset + i] = m
        pad[offset + i] = False
    return slots, pad


# ---------------------------------------------------------------------------
# memory module parameters and forward
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MemoryConfig:
    """Single-head attention with logits QK^T / sqrt(d) plus the additive mask."""

    d_model: int = 64
    layers: int = 2
    ff: int = 128
    history: int = 4   # T slots
    n_m: int = 4
    ln_eps: float = 1e-5

    @property
    def rows(self):
        return self.history * self.n_m


def init_memory_params(reg: ParamRegistry, cfg: MemoryConfig, rng):
    d = cfg.d_model
    u = lambda shape, fan: T.uniform_init(rng, shape, fan)
    reg.add("memory.slot_emb", u((cfg.history, d), d))
    reg.add("memory.pad_emb", u((1, d), d))
    for i in range(cfg.layers):
        p = f"memory.layers.{i}."
        reg.add(p + "ln1_g", np.ones(d, dtype=T.DEFAULT_DTYPE))
        reg.add(p + "ln1_b", T.zeros(d))
        for w in ("wq", "wk", "wv", "wo"):
            reg.add(p + w, u((d, d), d))
        reg.add(p + "ln2_g", np.ones(d, dtype=T.DEFAULT_DTYPE))
        reg.add(p + "ln2_b", T.zeros(d))
        reg.add(p + "ff_w1", u((d, cfg.ff), d))
        reg.add(p + "ff_b1", T.zeros(cfg.ff))
        reg.add(p + "ff_w2", u((cfg.ff, d), cfg.ff))
        reg.add(p + "ff_b2", T.zeros(d))
    reg.add("memory.ln_f_g", np.ones(d, dtype=T.DEFAULT_DTYPE))
    reg.add("memory.ln_f_b", T.zeros(d))


def assemble_history(slots, pad_slots, reg: ParamRegistry, cfg: MemoryConfig) -> Tensor:
    """Build the L x d history matrix: PAD rows from the learned embedding,
    slot-position embeddings added by buffer slot index.

    ``slots`` may be a (B, T, n_m, d) array (cached, constant) or a Tensor of
    that shape when gradients must flow back into the moment pathway.
    """
    if not isinstance(slots, Tensor):
        slots = Tensor(np.asarray(slots, dtype=T.DEFAULT_DTYPE))
    b = slots.shape[0]
    base = T.reshape(slots, (b, cfg.rows, cfg.d_model))
    row_pad = np.repeat(np.asarray(pad_slots, dtype=T.DEFAULT_DTYPE), cfg.n_m, axis=-1)
    row_pad = row_pad.reshape(b, cfg.rows, 1)
    pad_rows = T.embedding_gather(reg["memory.pad_emb"],
                                  np.zeros(cfg.rows, dtype=np.int64))
    keep = Tensor(1.0 - row_pad)
    m = T.add(T.mul(base, keep), T.mul(pad_rows, Tensor(row_pad)))
    slot_ids = np.repeat(np.arange(cfg.history), cfg.n_m)
    return T.add(m, T.embedding_gather(reg["memory.slot_emb"], slot_ids))


def memory_mask(pad_slots, cfg: MemoryConfig) -> Tensor:
    """Additive mask (B, L, L): -inf above the diagonal and at padded key
    columns; the diagonal itself is always open."""
    pad_rows = np.repeat(np.asarray(pad_slots, dtype=bool), cfg.n_m, axis=-1)
    b, rows = pad_rows.shape
    i = np.arange(rows)
    causal = np.where(i[None, :] > i[:, None], -np.inf, 0.0)
    mask = np.broadcast_to(causal, (b, rows, rows)).copy()
    col_block = pad_rows[:, None, :] & (i[None, :, None] != i[None, None, :])
    mask[col_block] = -np.inf
    return Tensor(mask.astype(T.DEFAULT_DTYPE))


def consolidate(history: Tensor, pad_slots, reg: ParamRegistry, cfg: MemoryConfig,
                capture_attention=False):
    """2-layer causal self-attention over the history matrix; returns the last
    n_m rows as the history-augmented feature plus per-layer attention maps."""
    mask = memory_mask(pad_slots, cfg)
    inv_sqrt_d = 1.0 / np.sqrt(cfg.d_model)
    x = history
    cap = [] if capture_attention else None
    for i in range(cfg.layers):
        p = f"memory.layers.{i}."
        xn = T.layer_norm(x, reg[p + "ln1_g"], reg[p + "ln1_b"], cfg.ln_eps)
        q = T.matmul(xn, reg[p + "wq"])
        k = T.matmul(xn, reg[p + "wk"])
        v = T.matmul(xn, reg[p + "wv"])
        logits = T.add(T.scale(T.matmul(q, T.swap_last2(k)), inv_sqrt_d), mask)
        probs = T.softmax_last_axis(logits)
        if cap is not None:
            cap.append(probs.data.copy())
        attn_out = T.matmul(T.matmul(probs, v), reg[p + "wo"])
        x = T.add(x, attn_out)
        xn2 = T.layer_norm(x, reg[p + "ln2_g"], reg[p + "ln2_b"], cfg.ln_eps)
        x = T.add(x, _ff(xn2, reg, p))
    y = T.layer_norm(x, reg["memory.ln_f_g"], reg["memory.ln_f_b"], cfg.ln_eps)
    m_tilde = T.slice_rows(y, cfg.rows - cfg.n_m, cfg.rows)
    return m_tilde, (cap or [])


def timestep_attention(attn_map: np.ndarray, cfg: MemoryConfig):
    """Collapse one (B, L, L) map to per-slot attention of the current query
    block: query rows averaged, key rows summed within each timestep slot.
    Returns (B, T)."""
    q = attn_map[:, cfg.rows - cfg.n_m:, :]
    per_key = q.mean(axis=1)
    return per_key.reshape(per_key.shape[0], cfg.history, cfg.n_m).sum(axis=-1)
