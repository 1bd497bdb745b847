"""Training stages: single-frame behavioral cloning, moment-token TCL, and the
history-aware fine-tuning variants (attention memory, raw concat, recurrent),
plus memory-module transfer and the ablation grid runner."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .action_expert import chunk_loss, predict_chunk
from .backbone import encode, tokenize
from .env.demos import Trajectory, chunk_at
from .memory import assemble_history, consolidate
from .moment import TCLBatchSpec, train_moment_tokens
from .optim import adam_step
from .policy import (HISTORY_MODES, MODES, RECURRENT_MODES, PolicyBundle,
                     PolicyConfig, attach_memory, add_moment_tokens,
                     new_single_frame_bundle, precompute_moment_cache,
                     recurrent_history, window_slots)
from .tensor import Tape, Tensor, backward


@dataclass
class VariantSpec:
    """One training/evaluation variant; fields that a mode does not use are
    ignored but validated for consistency."""

    mode: str = "hamlet"
    n_m: int = 4
    history: int = 4
    k: int = 4
    mem_layers: int = 2
    freeze_backbone: bool = True
    freeze_moment_tokens: bool = True
    use_tcl_init: bool = True
    steps: int = 3000
    lr: float = 1e-3
    batch: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    def policy_config(self, base: PolicyConfig) -> PolicyConfig:
        return replace(base, n_m=self.n_m, history=self.history, k=self.k,
                       mem_layers=self.mem_layers)


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def check_finite(self, step):
        if not np.isfinite(self.losses[-1]):
            raise RuntimeError(
                f"training diverged at step {step}: loss={self.losses[-1]}, "
                f"last 5 losses={self.losses[-6:-1]}")


def _aligned_samples(trajectories, k):
    return [(ti, t) for ti, tr in enumerate(trajectories) for t in range(0, len(tr), k)]


# ---------------------------------------------------------------------------
# stage 1: single-frame behavioral cloning
# ---------------------------------------------------------------------------


def pretrain_single_frame(trajectories: list[Trajectory], config: PolicyConfig,
                          steps: int, lr: float, batch: int, seed: int,
                          task_id="") -> tuple[PolicyBundle, TrainLog]:
    """Behavioral cloning of k-step expert chunks at chunk-aligned timesteps
    from single observations; no moment tokens, no memory."""
    if not trajectories:
        raise ValueError("empty demonstration set")
    bundle = new_single_frame_bundle(config, seed, task_id=task_id)
    reg, bb = bundle.registry, config.backbone
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    samples = _aligned_samples(trajectories, config.k)
    seqs = {}
    log = TrainLog()
    t0 = time.perf_counter()
    for step in range(steps):
        idx = rng.integers(0, len(samples), size=batch)
        batch_seqs, props, chunks = [], [], []
        for i in idx:
            ti, t = samples[i]
            tr = trajectories[ti]
            key = (ti, t)
            if key not in seqs:
                seqs[key] = tokenize(tr.observations[t], tr.instruction, bb)
            batch_seqs.append(seqs[key])
            props.append(tr.proprios[t])
            chunks.append(chunk_at(tr, t, config.k))
        reg.zero_grad()
        with Tape() as tape:
            out = encode(batch_seqs, reg, bb)
            logits = predict_chunk(out.h, None, np.stack(props), reg, config.k)
            loss = chunk_loss(logits, np.stack(chunks))
        log.losses.append(loss.item())
        log.check_finite(step)
        backward(loss, tape)
        adam_step(reg, lr)
    log.wall_seconds = time.perf_counter() - t0
    bundle.stage = "stage1"
    return bundle, log


# ---------------------------------------------------------------------------
# stage 2: time-contrastive moment-token initialization
# ---------------------------------------------------------------------------


def train_tcl_stage(stage1: PolicyBundle, trajectories, steps: int, lr: float,
                    batch: int, seed: int, tau: float | None = None) -> tuple[PolicyBundle, list]:
    """Freeze the backbone, add moment tokens + projection head, run TCL."""
    bundle = add_moment_tokens(stage1, seed)
    reg = bundle.registry
    reg.freeze_prefix("backbone.", True)
    reg.freeze_prefix("expert.", True)
    spec = TCLBatchSpec(batch=batch, tau=tau if tau is not None else bundle.config.tau,
                        min_negative_offset=bundle.config.k)
    result = train_moment_tokens(reg, bundle.config.backbone, bundle.config.n_m,
                                 trajectories, spec, steps, lr, seed + 1)
    reg.freeze_prefix("expert.", False)
    bundle.stage = "stage2"
    return bundle, result.losses


# ---------------------------------------------------------------------------
# stage 3: history-aware fine-tuning variants
# ---------------------------------------------------------------------------


def _history_feature_train(bundle, slots, pads, reg):
    cfg = bundle.config
    if bundle.mode == "hamlet":
        hist_mat = assemble_history(slots, pads, reg, cfg.memory)
        feat, _ = consolidate(hist_mat, pads, reg, cfg.memory)
        return feat
    if bundle.mode == "moment_concat":
        if isinstance(slots, Tensor):
            return T.reshape(slots, (slots.shape[0], -1))
        return Tensor(slots.reshape(slots.shape[0], -1).astype(T.DEFAULT_DTYPE))
    return recurrent_history(slots, pads, reg, bundle.mode, cfg.memory)


def finetune_history_variant(stage2: PolicyBundle, trajectories, spec: VariantSpec,
                             seed: int) -> tuple[PolicyBundle, TrainLog]:
    """Shared fine-tuning loop for hamlet / moment_concat / rnn / lstm / gru.

    With the default recipe (backbone and moment tokens frozen) per-frame
    moment outputs are precomputed once and training touches only the memory
    parameters and the action expert; the trainable-recipe ablation runs live
    backbone passes instead.
    """
    if spec.mode not in HISTORY_MODES:
        raise ValueError(f"finetune_history_variant got mode {spec.mode!r}")
    bundle = attach_memory(stage2, spec.mode, seed)
    bundle.meta["use_tcl_init"] = spec.use_tcl_init
    cfg = bundle.config
    reg, bb = bundle.registry, cfg.backbone
    reg.freeze_prefix("backbone.", spec.freeze_backbone)
    reg.freeze_prefix("moment.", spec.freeze_moment_tokens)
    reg.freeze_prefix("proj.", True)  # projection head is TCL-only
    frozen_names = [n for n in reg.names() if reg.is_frozen(n)]
    before = {n: reg[n].data.copy() for n in frozen_names}

    live = not (spec.freeze_backbone and spec.freeze_moment_tokens)
    rng = np.random.Generator(np.random.PCG64(seed + 2))
    samples = _aligned_samples(trajectories, cfg.k)
    log = TrainLog()
    t0 = time.perf_counter()

    if not live:
        h_cache, m_cache = precompute_moment_cache(bundle, trajectories)

    for step in range(spec.steps):
        idx = rng.integers(0, len(samples), size=spec.batch)
        props = np.stack([trajectories[ti].proprios[t] for ti, t in (samples[i] for i in idx)])
        chunks = np.stack([chunk_at(trajectories[ti], t, cfg.k)
                           for ti, t in (samples[i] for i in idx)])
        reg.zero_grad()
        with Tape() as tape:
            if live:
                h, slots, pads = _encode_windows_live(bundle, trajectories,
                                                      [samples[i] for i in idx])
            else:
                slot_list, pads = [], np.zeros((spec.batch, cfg.history), dtype=bool)
                h_rows = []
                for row, i in enumerate(idx):
                    ti, t = samples[i]
                    s, n_real = window_slots(m_cache[ti], t // cfg.k, cfg.history)
                    slot_list.append(s)
                    pads[row, :cfg.history - n_real] = True
                    h_rows.append(h_cache[ti][t // cfg.k])
                slots = np.stack(slot_list)
                h = Tensor(np.stack(h_rows))
            feat = _history_feature_train(bundle, slots, pads, reg)
            logits = predict_chunk(h, feat, props, reg, cfg.k)
            loss = chunk_loss(logits, chunks)
        log.losses.append(loss.item())
        log.check_finite(step)
        backward(loss, tape)
        adam_step(reg, spec.lr)

    log.wall_seconds = time.perf_counter() - t0
    for n in frozen_names:
        if not np.array_equal(before[n], reg[n].data):
            raise RuntimeError(f"freeze contract violated during fine-tuning: {n}")
    bundle.stage = "stage3"
    return bundle, log


def _encode_windows_live(bundle, trajectories, picked):
    """Window frames through the backbone with gradients; padded slots carry a
    dummy frame whose moment output is masked out by the PAD pathway."""
    cfg = bundle.config
    bb = cfg.backbone
    reg = bundle.registry
    b = len(picked)
    t_hist, k = cfg.history, cfg.k
    seqs, pads = [], np.zeros((b, t_hist), dtype=bool)
    blank = np.zeros(bb.n_cells, dtype=np.int64)
    for row, (ti, t) in enumerate(picked):
        tr = trajectories[ti]
        for s in range(t_hist):
            tt = t - k * (t_hist - 1 - s)
            if tt < 0:
                pads[row, s] = True
                seqs.append(tokenize(blank, tr.instruction, bb, with_moment=True,
                                     n_moment=cfg.n_m))
            else:
                seqs.append(tokenize(tr.observations[tt], tr.instruction, bb,
                                     with_moment=True, n_moment=cfg.n_m))
    out = encode(seqs, reg, bb, moments=reg["moment.tokens"])
    m = T.reshape(out.m_prime, (b, t_hist, cfg.n_m, bb.d_model))
    h_all = T.reshape(out.h, (b, t_hist, bb.d_model))
    h = T.reshape(T.slice_rows(h_all, t_hist - 1, t_hist), (b, bb.d_model))
    return h, m, pads


def finetune_hamlet(stage2, trajectories, spec: VariantSpec, seed: int):
    if spec.mode != "hamlet":
        raise ValueError("finetune_hamlet requires mode='hamlet'")
    return finetune_history_variant(stage2, trajectories, spec, seed)


def finetune_moment_concat(stage2, trajectories, spec: VariantSpec, seed: int):
    if spec.mode != "moment_concat":
        raise ValueError("finetune_moment_concat requires mode='moment_concat'")
    return finetune_history_variant(stage2, trajectories, spec, seed)


def finetune_recurrent(stage2, trajectories, spec: VariantSpec, seed: int):
    if spec.mode not in RECURRENT_MODES:
        raise ValueError("finetune_recurrent requires mode in {rnn, lstm, gru}")
    return finetune_history_variant(stage2, trajectories, spec, seed)


# ---------------------------------------------------------------------------
# multi-frame baseline
# ---------------------------------------------------------------------------


def finetune_multi_frame(stage1: PolicyBundle, trajectories, spec: VariantSpec,
                         seed: int) -> tuple[PolicyBundle, TrainLog]:
    """Re-fine-tune the backbone on stacked-frame inputs (fresh frame-index
    embeddings), history frames at chunk spacing, oldest first; warm-up
    repeats the first frame."""
    if spec.mode != "multi_frame":
        raise ValueError("finetune_multi_frame requires mode='multi_frame'")
    cfg = spec.policy_config(stage1.config)
    if cfg.history > cfg.backbone.max_frames:
        raise ValueError(f"history {cfg.history} exceeds max_frames={cfg.backbone.max_frames}")
    from .policy import copy_registry
    reg = copy_registry(stage1.registry)
    bundle = PolicyBundle(mode="multi_frame", config=cfg, registry=reg,
                          task_id=stage1.task_id, stage="memory_init",
                          meta=dict(stage1.meta))
    bb = cfg.backbone
    rng = np.random.Generator(np.random.PCG64(seed + 3))
    samples = _aligned_samples(trajectories, cfg.k)
    log = TrainLog()
    t0 = time.perf_counter()
    for step in range(spec.steps):
        idx = rng.integers(0, len(samples), size=spec.batch)
        seqs, props, chunks = [], [], []
        for i in idx:
            ti, t = samples[i]
            tr = trajectories[ti]
            stack = [tr.observations[max(t - cfg.k * s, 0)]
                     for s in range(cfg.history - 1, 0, -1)]
            seqs.append(tokenize(tr.observations[t], tr.instruction, bb,
                                 frame_stack=stack))
            props.append(tr.proprios[t])
            chunks.append(chunk_at(tr, t, cfg.k))
        reg.zero_grad()
        with Tape() as tape:
            out = encode(seqs, reg, bb)
            logits = predict_chunk(out.h, None, np.stack(props), reg, cfg.k)
            loss = chunk_loss(logits, np.stack(chunks))
        log.losses.append(loss.item())
        log.check_finite(step)
        backward(loss, tape)
        adam_step(reg, spec.lr)
    log.wall_seconds = time.perf_counter() - t0
    bundle.stage = "stage3"
    return bundle, log


# ---------------------------------------------------------------------------
# memory-module transfer
# ---------------------------------------------------------------------------


def transfer_memory(source: PolicyBundle, target_stage2: PolicyBundle,
                    trajectories_target, spec: VariantSpec, seed: int):
    """Copy the trained memory module from ``source``, freeze it, and fine-tune
    only the action expert on the target task (moment tokens come from the
    target task's own TCL stage and stay frozen)."""
    if source.mode != "hamlet":
        raise ValueError("transfer source must be a hamlet bundle")
    bundle = attach_memory(target_stage2, "hamlet", seed)
    reg = bundle.registry
    mem_names = [n for n in reg.names() if n.startswith("memory.")]
    for n in mem_names:
        src = source.registry[n]
        if src.shape != reg[n].shape:
            raise T.ShapeMismatch(
                f"memory parameter {n} shape {src.shape} != target {reg[n].shape}")
        reg[n].data[...] = src.data
    reg.freeze_prefix("memory.", True)
    reg.freeze_prefix("backbone.", True)
    reg.freeze_prefix("moment.", True)
    reg.freeze_prefix("proj.", True)
    before = {n: reg[n].data.copy() for n in mem_names}

    cfg = bundle.config
    rng = np.random.Generator(np.random.PCG64(seed + 4))
    samples = _aligned_samples(trajectories_target, cfg.k)
    h_cache, m_cache = precompute_moment_cache(bundle, trajectories_target)
    log = TrainLog()
    t0 = time.perf_counter()
    for step in range(spec.steps):
        idx = rng.integers(0, len(samples), size=spec.batch)
        slot_list, h_rows, props, chunks = [], [], [], []
        pads = np.zeros((spec.batch, cfg.history), dtype=bool)
        for row, i in enumerate(idx):
            ti, t = samples[i]
            s, n_real = window_slots(m_cache[ti], t // cfg.k, cfg.history)
            slot_list.append(s)
            pads[row, :cfg.history - n_real] = True
            h_rows.append(h_cache[ti][t // cfg.k])
            props.append(trajectories_target[ti].proprios[t])
            chunks.append(chunk_at(trajectories_target[ti], t, cfg.k))
        reg.zero_grad()
        with Tape() as tape:
            feat, _ = consolidate(assemble_history(np.stack(slot_list), pads, reg,
                                                   cfg.memory), pads, reg, cfg.memory)
            logits = predict_chunk(Tensor(np.stack(h_rows)), feat, np.stack(props),
                                   reg, cfg.k)
            loss = chunk_loss(logits, np.stack(chunks))
        log.losses.append(loss.item())
        log.check_finite(step)
        backward(loss, tape)
        adam_step(reg, spec.lr)
    log.wall_seconds = time.perf_counter() - t0
    for n in mem_names:
        if not np.array_equal(before[n], reg[n].data):
            raise RuntimeError(f"transferred memory parameter {n} drifted")
    bundle.stage = "transfer"
    bundle.meta["transfer_source_task"] = source.task_id
    return bundle, log


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

GRID_AXES = {
    "n_m": (1, 2, 4, 8, 16),
    "use_tcl_init": (True, False),
    "memory": ("none", "concat", "rnn", "lstm", "gru", "transformer"),
    "history": (2, 4, 8),
}

_MEMORY_TO_MODE = {"none": "single_frame", "concat": "moment_concat",
                   "rnn": "rnn", "lstm": "lstm", "gru": "gru",
                   "transformer": "hamlet"}


def run_ablation_grid(axes: dict, base_spec: VariantSpec, train_fn, eval_fn,
                      seed: int) -> list[dict]:
    """Cartesian product over the requested axes; each cell trains via
    ``train_fn(spec)`` and evaluates via ``eval_fn(bundle)``.  Failures are
    recorded per cell and the grid continues."""
    for name, values in axes.items():
        if name not in GRID_AXES:
            raise ValueError(f"unknown ablation axis {name!r}")
        bad = [v for v in values if v not in GRID_AXES[name]]
        if bad:
            raise ValueError(f"axis {name!r} has unsupported values {bad}")
    names = sorted(axes)
    rows = []

    def rec(i, assignment):
        if i == len(names):
            spec = replace(base_spec, seed=seed)
            cell = dict(assignment)
            if "n_m" in cell:
                spec = replace(spec, n_m=cell["n_m"])
            if "use_tcl_init" in cell:
                spec = replace(spec, use_tcl_init=cell["use_tcl_init"])
            if "history" in cell:
                spec = replace(spec, history=cell["history"])
            if "memory" in cell:
                spec = replace(spec, mode=_MEMORY_TO_MODE[cell["memory"]])
            row = {"cell": dict(cell), "mode": spec.mode, "seed": seed}
            t0 = time.perf_counter()
            try:
                bundle = train_fn(spec)
                row.update(eval_fn(bundle))
                row["status"] = "ok"
            except Exception as exc:  # grid keeps going per contract
                row["status"] = "failed"
                row["error"] = f"{type(exc).__name__}: {exc}"
            row["wall_seconds"] = time.perf_counter() - t0
            rows.append(row)
            return
        for v in axes[names[i]]:
            rec(i + 1, assignment + [(names[i], v)])

    rec(0, [])
    return rows
