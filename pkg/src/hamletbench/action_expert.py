"""Chunked action head: k future action logits from the readout state, an
optional flattened history feature, and the proprio state.

The history slice of the input projection always exists and is initialized to
zeros, so a freshly attached history pathway leaves a pretrained policy's
logits bit-identical until fine-tuning moves the weights.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .env.world import N_ACTIONS
from .optim import ParamRegistry
from .tensor import Tensor

PROPRIO_DIM = 3
PROPRIO_EMBED = 16
HIDDEN = 128


def init_expert_params(reg: ParamRegistry, rng, d_model: int, hist_width: int, k: int):
    d_in = d_model + hist_width + PROPRIO_EMBED
    u = lambda shape, fan: T.uniform_init(rng, shape, fan)
    reg.add("expert.w_prop", u((PROPRIO_DIM, PROPRIO_EMBED), PROPRIO_DIM))
    reg.add("expert.b_prop", T.zeros(PROPRIO_EMBED))
    w_in = np.zeros((d_in, HIDDEN), dtype=T.DEFAULT_DTYPE)
    w_in[:d_model] = u((d_model, HIDDEN), d_in)
    # rows d_model .. d_model+hist_width stay zero: the history slice
    w_in[d_model + hist_width:] = u((PROPRIO_EMBED, HIDDEN), d_in)
    reg.add("expert.w_in", w_in)
    reg.add("expert.b_in", T.zeros(HIDDEN))
    reg.add("expert.w_h1", u((HIDDEN, HIDDEN), HIDDEN))
    reg.add("expert.b_h1", T.zeros(HIDDEN))
    reg.add("expert.w_h2", u((HIDDEN, HIDDEN), HIDDEN))
    reg.add("expert.b_h2", T.zeros(HIDDEN))
    reg.add("expert.w_out", u((HIDDEN, k * N_ACTIONS), HIDDEN))
    reg.add("expert.b_out", T.zeros(k * N_ACTIONS))


def expert_hist_width(reg: ParamRegistry, d_model: int) -> int:
    return reg["expert.w_in"].shape[0] - d_model - PROPRIO_EMBED


def predict_chunk(h: Tensor, hist: Tensor | None, proprio, reg: ParamRegistry,
                  k: int) -> Tensor:
    """Logits of shape (B, k, |A|); ``hist`` is flattened row-major, and an
    absent history feature is replaced by zeros of the same width."""
    b, d_model = h.shape
    hw = expert_hist_width(reg, d_model)
    if hist is None:
        hist = Tensor(np.zeros((b, hw), dtype=h.dtype))
    elif hist.data.ndim > 2:
        hist = T.reshape(hist, (b, -1))
    if hist.shape != (b, hw):
        raise T.ShapeMismatch(f"history feature {hist.shape} != expected ({b}, {hw})")
    prop = np.asarray(proprio, dtype=h.dtype).reshape(b, PROPRIO_DIM)
    p_emb = T.add(T.matmul(Tensor(prop), reg["expert.w_prop"]), reg["expert.b_prop"])
    x = T.concat_last_axis(T.concat_last_axis(h, hist), p_emb)
    z = T.gelu(T.add(T.matmul(x, reg["expert.w_in"]), reg["expert.b_in"]))
    z = T.gelu(T.add(T.matmul(z, reg["expert.w_h1"]), reg["expert.b_h1"]))
    z = T.gelu(T.add(T.matmul(z, reg["expert.w_h2"]), reg["expert.b_h2"]))
    logits = T.add(T.matmul(z, reg["expert.w_out"]), reg["expert.b_out"])
    return T.reshape(logits, (b, k, N_ACTIONS))


def chunk_loss(logits: Tensor, expert_actions) -> Tensor:
    """Mean cross-entropy over every chunk position in the batch."""
    b, k, a = logits.shape
    flat = T.reshape(logits, (b * k, a))
    targets = np.asarray(expert_actions, dtype=np.int64).reshape(b * k)
    return T.cross_entropy_from_logits(flat, targets)


def decode_actions(logits) -> np.ndarray:
    """Per-position argmax; np.argmax takes the first maximum, so ties break
    toward the lowest action id."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(arr, axis=-1).astype(np.int64)
