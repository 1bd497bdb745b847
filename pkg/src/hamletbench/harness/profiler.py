"""Efficiency profiling: exact analytic token/MAC/peak-activation counts as
pure functions of configuration, plus wall-clock latency per environment
timestep measured over batched seeded rollouts.

Latency methodology: a fixed cohort of episodes advances in lockstep on one
thread; finished episodes are immediately replaced from the shared seed
stream so every forward serves a full batch.  Only policy compute is timed
(environment stepping is excluded), the first ``warmup`` forwards are
dropped, and the top/bottom 5% of per-forward samples are trimmed.  Batching
keeps BLAS work rather than Python dispatch dominant, mirroring amortized
deployment inference; identical seed streams make variants comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from time import perf_counter

import numpy as np

from .. import infer
from ..action_expert import PROPRIO_EMBED, HIDDEN, decode_actions
from ..backbone import tokenize
from ..env import world
from ..env.demos import episode_seed
from ..env import tasks
from ..memory import MemoryBuffer, stack_history
from ..policy import HISTORY_MODES, PolicyBundle, PolicyConfig

PROFILE_MODES = ("single_frame", "hamlet", "multi_frame", "moment_concat",
                 "rnn", "lstm", "gru")


# ---------------------------------------------------------------------------
# analytic counts (platform-independent integers)
# ---------------------------------------------------------------------------


def backbone_tokens(cfg: PolicyConfig, mode: str, instr_len: int) -> int:
    cells = cfg.backbone.n_cells
    if mode == "multi_frame":
        return instr_len + cfg.history * cells + 1
    n_m = cfg.n_m if mode in HISTORY_MODES else 0
    return instr_len + cells + 1 + n_m


def memory_rows(cfg: PolicyConfig, mode: str) -> int:
    return cfg.history * cfg.n_m if mode in HISTORY_MODES else 0


def _transformer_macs(s: int, d: int, ff: int, layers: int) -> int:
    per_layer = 3 * s * d * d + 2 * s * s * d + s * d * d + 2 * s * d * ff
    return layers * per_layer


def expert_macs(cfg: PolicyConfig, mode: str) -> int:
    d = cfg.backbone.d_model
    hist_w = (cfg.history if mode == "moment_concat" else 1) * cfg.n_m * d
    d_in = d + hist_w + PROPRIO_EMBED
    return (3 * PROPRIO_EMBED + d_in * HIDDEN + 2 * HIDDEN * HIDDEN
            + HIDDEN * cfg.k * world.N_ACTIONS)


def mac_count(cfg: PolicyConfig, mode: str, instr_len: int) -> int:
    """Multiply-accumulates of one action-chunk forward pass."""
    bb = cfg.backbone
    s = backbone_tokens(cfg, mode, instr_len)
    total = _transformer_macs(s, bb.d_model, bb.ff, bb.layers)
    if mode == "hamlet":
        total += _transformer_macs(memory_rows(cfg, mode), bb.d_model,
                                   cfg.mem_ff, cfg.mem_layers)
    elif mode in ("rnn", "lstm", "gru"):
        gates = {"rnn": 1, "lstm": 4, "gru": 3}[mode]
        total += cfg.history * gates * 2 * bb.d_model * bb.d_model
    total += expert_macs(cfg, mode)
    return total


def peak_scalars(cfg: PolicyConfig, mode: str, instr_len: int) -> int:
    """Analytic peak live activation scalars of one forward pass.

    Convention: within a transformer layer the live set peaks either at the
    attention softmax (residual + normed input + Q/K/V + logit and probability
    matrices + context) or inside the feed-forward hidden; stages run
    sequentially, so the forward peak is the largest stage peak plus the
    persistent history carry (stacked moment outputs) where one exists.
    """
    bb = cfg.backbone
    d = bb.d_model

    def stage_peak(s, ff, heads):
        attn = 6 * s * d + 2 * heads * s * s
        ffp = 3 * s * d + s * ff
        return max(attn, ffp)

    s = backbone_tokens(cfg, mode, instr_len)
    peak = stage_peak(s, bb.ff, bb.heads)
    carry = 0
    if mode in HISTORY_MODES:
        carry = memory_rows(cfg, mode) * d + d
        if mode == "hamlet":
            peak = max(peak, stage_peak(memory_rows(cfg, mode), cfg.mem_ff, 1))
    expert_live = (d + (cfg.history if mode == "moment_concat" else 1) * cfg.n_m * d
                   + PROPRIO_EMBED + 2 * HIDDEN + cfg.k * world.N_ACTIONS)
    return int(max(peak, expert_live) + carry)


# ---------------------------------------------------------------------------
# batched latency measurement
# ---------------------------------------------------------------------------


class _EpisodeSlot:
    def __init__(self, task_id, seed):
        self.reset(task_id, seed)

    def reset(self, task_id, seed):
        self.state, self.obs, self.proprio, self.instr = tasks.reset(task_id, seed)
        self.buffer = None
        self.frames: list = []


def _batched_chunk(bundle: PolicyBundle, slots: list[_EpisodeSlot]):
    """One batched policy forward for every episode slot; returns per-slot
    action chunks.  This is the timed region."""
    cfg = bundle.config
    bb = cfg.backbone
    reg = bundle.registry
    mode = bundle.mode
    b = len(slots)
    if mode == "single_frame":
        seqs = [tokenize(s.obs, s.instr, bb) for s in slots]
        h, _, _ = infer.encode_fast(seqs, reg, bb)
        hist = None
    elif mode == "multi_frame":
        seqs = []
        for s in slots:
            s.frames.append(np.asarray(s.obs))
            ring = s.frames[-cfg.history:]
            stack = [ring[0]] * (cfg.history - len(ring)) + ring
            seqs.append(tokenize(s.obs, s.instr, bb, frame_stack=stack[:-1]))
        h, _, _ = infer.encode_fast(seqs, reg, bb)
        hist = None
    else:
        seqs = [tokenize(s.obs, s.instr, bb, with_moment=True, n_moment=cfg.n_m)
                for s in slots]
        h, m_prime, _ = infer.encode_fast(seqs, reg, bb,
                                          moments=reg["moment.tokens"].data)
        slot_mats = np.zeros((b, cfg.history, cfg.n_m, bb.d_model), dtype=np.float32)
        n_reals = np.zeros(b, dtype=np.int64)
        for j, s in enumerate(slots):
            if s.buffer is None:
                s.buffer = MemoryBuffer(cfg.history, cfg.k)
            s.buffer.push(m_prime[j], s.state.t)
            mat, _ = stack_history(s.buffer)
            slot_mats[j] = mat
            n_reals[j] = len(s.buffer)
        hist = np.zeros((b, cfg.n_m * bb.d_model * (cfg.history if mode == "moment_concat" else 1)),
                        dtype=np.float32)
        for nr in np.unique(n_reals):
            sel = np.nonzero(n_reals == nr)[0]
            sub = slot_mats[sel]
            if mode == "hamlet":
                mat = infer.assemble_history_fast(sub, int(nr), reg, cfg.memory)
                feat, _ = infer.consolidate_fast(mat, int(nr), reg, cfg.memory)
                hist[sel] = feat.reshape(len(sel), -1)
            elif mode == "moment_concat":
                hist[sel] = sub.reshape(len(sel), -1)
            else:
                hist[sel] = infer.recurrent_history_fast(sub, int(nr), reg, mode,
                                                         cfg.memory)
    prop = np.stack([s.proprio for s in slots])
    logits = infer.expert_fast(h, hist, prop, reg, cfg.k)
    return decode_actions(logits)


@dataclass
class LatencyResult:
    per_timestep_ms: float
    n_forwards: int
    batch: int


class _Cohort:
    """A fixed batch of episodes for one bundle; finished episodes are
    replaced from the shared seed stream so every forward is full-batch."""

    def __init__(self, bundle, task_id, seed, batch):
        self.bundle = bundle
        self.task_id = task_id
        self.seed = seed
        self.next_episode = 0
        self.slots = [_EpisodeSlot(task_id, self._next_seed()) for _ in range(batch)]
        self.samples: list[float] = []

    def _next_seed(self):
        s = episode_seed(self.seed, self.next_episode)
        self.next_episode += 1
        return s

    def advance(self):
        t0 = perf_counter()
        chunks = _batched_chunk(self.bundle, self.slots)
        self.samples.append(perf_counter() - t0)
        for s, chunk in zip(self.slots, chunks):
            done = False
            for a in chunk:
                s.state, s.obs, s.proprio, done, _, _ = world.step(s.state, int(a))
                if done:
                    break
            if done:
                s.reset(self.task_id, self._next_seed())


def _trimmed_mean(samples, warmup):
    arr = np.array(sorted(samples[warmup:]))
    n5 = max(1, len(arr) // 20)
    trimmed = arr[n5:-n5] if len(arr) > 2 * n5 else arr
    return float(trimmed.mean())


def measure_latency(bundle: PolicyBundle, task_id: str, seed: int,
                    n_timesteps: int = 4000, batch: int = 16,
                    warmup: int = 20) -> LatencyResult:
    cfg = bundle.config
    cohort = _Cohort(bundle, task_id, seed, batch)
    steps_done = 0
    while steps_done < n_timesteps + warmup * batch * cfg.k:
        cohort.advance()
        steps_done += batch * cfg.k
    per_ts = _trimmed_mean(cohort.samples, warmup) / (batch * cfg.k)
    return LatencyResult(per_timestep_ms=per_ts * 1e3,
                         n_forwards=len(cohort.samples), batch=batch)


# ---------------------------------------------------------------------------
# full report
# ---------------------------------------------------------------------------


@dataclass
class EfficiencyRow:
    variant: str
    history: int
    backbone_tokens: int
    memory_rows: int
    macs: int
    peak_scalars: int
    latency_ms: float
    token_ratio: float = 0.0
    mac_ratio: float = 0.0
    peak_ratio: float = 0.0
    latency_ratio: float = 0.0


@dataclass
class EfficiencyReport:
    task: str
    instr_len: int
    batch: int
    n_timesteps: int
    rows: list = field(default_factory=list)

    def to_dict(self):
        return {"task": self.task, "instr_len": self.instr_len,
                "batch": self.batch, "n_timesteps": self.n_timesteps,
                "rows": [vars(r) for r in self.rows]}


def profile_efficiency(bundles: dict[tuple[str, int], PolicyBundle], task_id: str,
                       seed: int, n_timesteps: int = 8000, batch: int = 16,
                       warmup: int = 20, heavy_timesteps: int = 1500) -> EfficiencyReport:
    """``bundles`` maps (variant, T) to a policy bundle; the single_frame row
    is the ratio denominator and must be present.  Cohorts of all variants
    advance round-robin so slow clock drift affects every variant equally;
    multi_frame rows are capped at ``heavy_timesteps`` because their forwards
    are orders of magnitude heavier and their ratios insensitive to noise."""
    import gc

    _, _, _, instr = tasks.reset(task_id, episode_seed(seed, 0))
    instr_len = len(instr)
    report = EfficiencyReport(task=task_id, instr_len=instr_len, batch=batch,
                              n_timesteps=n_timesteps)
    base_key = next((k for k in bundles if k[0] == "single_frame"), None)
    if base_key is None:
        raise ValueError("profile requires a single_frame baseline bundle")
    order = [base_key] + [k for k in bundles if k != base_key]
    cohorts = {key: _Cohort(bundles[key], task_id, seed, batch) for key in order}
    steps_per_forward = {key: batch * bundles[key].config.k for key in order}
    budget = {key: (min(n_timesteps, heavy_timesteps) if key[0] == "multi_frame"
                    else n_timesteps) for key in order}
    n_forwards = {key: -(-(budget[key] + warmup * steps_per_forward[key])
                         // steps_per_forward[key]) for key in order}
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for r in range(max(n_forwards.values())):
            for key in order:
                if r < n_forwards[key]:
                    cohorts[key].advance()
    finally:
        if gc_was_enabled:
            gc.enable()
    lat = {key: _trimmed_mean(cohorts[key].samples, warmup) /
           steps_per_forward[key] * 1e3 for key in order}
    base_cfg = bundles[base_key].config
    base = EfficiencyRow(
        variant="single_frame", history=base_key[1],
        backbone_tokens=backbone_tokens(base_cfg, "single_frame", instr_len),
        memory_rows=0,
        macs=mac_count(base_cfg, "single_frame", instr_len),
        peak_scalars=peak_scalars(base_cfg, "single_frame", instr_len),
        latency_ms=lat[base_key])
    for key in order:
        mode, t = key
        cfg = bundles[key].config
        row = base if key == base_key else EfficiencyRow(
            variant=mode, history=t,
            backbone_tokens=backbone_tokens(cfg, mode, instr_len),
            memory_rows=memory_rows(cfg, mode),
            macs=mac_count(cfg, mode, instr_len),
            peak_scalars=peak_scalars(cfg, mode, instr_len),
            latency_ms=lat[key])
        row.token_ratio = row.backbone_tokens / base.backbone_tokens
        row.mac_ratio = row.macs / base.macs
        row.peak_ratio = row.peak_scalars / base.peak_scalars
        row.latency_ratio = row.latency_ms / base.latency_ms
        report.rows.append(row)
    return report
