"""Policy bundles (parameters + config + mode) and the per-chunk inference
runtime shared by evaluation, profiling and attention export."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import infer
from . import tensor as T
from .action_expert import decode_actions, init_expert_params
from .backbone import BackboneConfig, init_backbone_params, tokenize
from .checkpoint import load_checkpoint, save_checkpoint
from .env import world
from .env.demos import Trajectory, chunk_at
from .memory import MemoryBuffer, MemoryConfig, init_memory_params, stack_history
from .moment import init_moment_tokens, init_projection_head
from .optim import ParamRegistry
from .tensor import Tensor

MODES = ("single_frame", "hamlet", "multi_frame", "moment_concat", "rnn", "lstm", "gru")
RECURRENT_MODES = ("rnn", "lstm", "gru")
HISTORY_MODES = ("hamlet", "moment_concat", "rnn", "lstm", "gru")


@dataclass(frozen=True)
class PolicyConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    k: int = 4
    n_m: int = 4
    history: int = 4       # T
    mem_layers: int = 2
    mem_ff: int = 64
    d_proj: int = 32
    tau: float = 0.1

    @property
    def memory(self) -> MemoryConfig:
        return MemoryConfig(d_model=self.backbone.d_model,
                            layers=self.mem_layers, ff=self.mem_ff,
                            history=self.history, n_m=self.n_m,
                            ln_eps=self.backbone.ln_eps)

    def to_dict(self):
        d = asdict(self)
        d["backbone"] = asdict(self.backbone)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["backbone"] = BackboneConfig(**d["backbone"])
        return cls(**d)


@dataclass
class PolicyBundle:
    mode: str
    config: PolicyConfig
    registry: ParamRegistry
    task_id: str = ""
    stage: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def uses_history(self):
        return self.mode in HISTORY_MODES

    def save(self, path):
        meta = {"mode": self.mode, "task_id": self.task_id, "stage": self.stage,
                "config": self.config.to_dict(), **self.meta}
        save_checkpoint(path, self.registry, meta)

    @classmethod
    def load(cls, path):
        registry, meta = load_checkpoint(path)
        meta = dict(meta)
        config = PolicyConfig.from_dict(meta.pop("config"))
        return cls(mode=meta.pop("mode"), config=config, registry=registry,
                   task_id=meta.pop("task_id", ""), stage=meta.pop("stage", ""),
                   meta=meta)


def copy_registry(reg: ParamRegistry) -> ParamRegistry:
    out = ParamRegistry()
    for name, t in reg.items():
        out.add(name, t.data.copy(), frozen=reg.is_frozen(name))
    return out


# ---------------------------------------------------------------------------
# bundle construction
# ---------------------------------------------------------------------------


def new_single_frame_bundle(config: PolicyConfig, seed: int, task_id="") -> PolicyBundle:
    rng = np.random.Generator(np.random.PCG64(seed))
    reg = ParamRegistry()
    init_backbone_params(reg, config.backbone, rng)
    init_expert_params(reg, rng, config.backbone.d_model,
                       config.n_m * config.backbone.d_model, config.k)
    return PolicyBundle(mode="single_frame", config=config, registry=reg,
                        task_id=task_id, stage="init")


def add_moment_tokens(bundle: PolicyBundle, seed: int) -> PolicyBundle:
    """Stage-2 starting point: add moment tokens and the projection head."""
    rng = np.random.Generator(np.random.PCG64(seed))
    reg = copy_registry(bundle.registry)
    init_moment_tokens(reg, rng, bundle.config.n_m, bundle.config.backbone.d_model)
    init_projection_head(reg, rng, bundle.config.backbone.d_model, bundle.config.d_proj)
    return PolicyBundle(mode="hamlet", config=bundle.config, registry=reg,
                        task_id=bundle.task_id, stage="moment_init", meta=dict(bundle.meta))


def init_recurrent_params(reg: ParamRegistry, kind: str, d: int, rng):
    gates = {"rnn": 1, "lstm": 4, "gru": 3}[kind]
    u = lambda shape, fan: T.uniform_init(rng, shape, fan)
    reg.add("memory.cell_w_ih", u((d, gates * d), d))
    reg.add("memory.cell_w_hh", u((d, gates * d), d))
    reg.add("memory.cell_b", T.zeros(gates * d))


def _rebuild_expert(reg_new, reg_old, rng, d_model, hist_width, k):
    """Fresh expert sized for ``hist_width``; readout and proprio slices are
    carried over from the old expert, the history slice starts at zero."""
    init_expert_params(reg_new, rng, d_model, hist_width, k)
    old = reg_old["expert.w_in"].data
    old_hw = old.shape[0] - d_model - 16
    new = reg_new["expert.w_in"].data
    new[:d_model] = old[:d_model]
    new[d_model + hist_width:] = old[d_model + old_hw:]
    for name in ("expert.w_prop", "expert.b_prop", "expert.b_in", "expert.w_h1",
                 "expert.b_h1", "expert.w_h2", "expert.b_h2", "expert.w_out",
                 "expert.b_out"):
        reg_new[name].data[...] = reg_old[name].data


def attach_memory(bundle: PolicyBundle, mode: str, seed: int) -> PolicyBundle:
    """Stage-3 starting point for a history-aware variant."""
    if mode not in HISTORY_MODES:
        raise ValueError(f"not a history-aware mode: {mode}")
    rng = np.random.Generator(np.random.PCG64(seed))
    cfg = bundle.config
    reg = ParamRegistry()
    for name, t in bundle.registry.items():
        if name.startswith("memory.") or (mode == "moment_concat" and name.startswith("expert.")):
            continue
        reg.add(name, t.data.copy(), frozen=bundle.registry.is_frozen(name))
    if mode == "hamlet":
        init_memory_params(reg, cfg.memory, rng)
    elif mode in RECURRENT_MODES:
        init_recurrent_params(reg, mode, cfg.backbone.d_model, rng)
    else:  # moment_concat widens the expert input to the raw stacked history
        _rebuild_expert(reg, bundle.registry, rng, cfg.backbone.d_model,
                        cfg.memory.rows * cfg.backbone.d_model, cfg.k)
    return PolicyBundle(mode=mode, config=cfg, registry=reg,
                        task_id=bundle.task_id, stage="memory_init",
                        meta=dict(bundle.meta))


def make_profile_bundle(mode: str, config: PolicyConfig, seed: int) -> PolicyBundle:
    """Freshly initialized bundle of any mode, for timing and count checks."""
    b = new_single_frame_bundle(config, seed)
    if mode == "single_frame":
        return b
    if mode == "multi_frame":
        return PolicyBundle(mode="multi_frame", config=config, registry=b.registry,
                            stage="init")
    return attach_memory(add_moment_tokens(b, seed + 1), mode, seed + 2)


# ---------------------------------------------------------------------------
# recurrent history consolidation
# ---------------------------------------------------------------------------


def _gate(x, lo, hi):
    return T.slice_last_axis(x, lo, hi)


def recurrent_history(slots, pad_slots, reg: ParamRegistry, kind: str,
                      cfg: MemoryConfig) -> Tensor:
    """Unroll a single accumulated hidden state over the mean-pooled moment
    outputs, oldest slot first; padded slots leave the state untouched (so a
    fresh episode starts from the zero vector).  The final hidden state is
    broadcast to the n_m x d history feature."""
    if not isinstance(slots, Tensor):
        slots = Tensor(np.asarray(slots, dtype=T.DEFAULT_DTYPE))
    b, t_slots = slots.shape[0], slots.shape[1]
    d = cfg.d_model
    pad = np.asarray(pad_slots, dtype=T.DEFAULT_DTYPE).reshape(b, t_slots, 1)
    h = Tensor(np.zeros((b, d), dtype=T.DEFAULT_DTYPE))
    c = Tensor(np.zeros((b, d), dtype=T.DEFAULT_DTYPE))
    w_ih, w_hh, bias = reg["memory.cell_w_ih"], reg["memory.cell_w_hh"], reg["memory.cell_b"]
    for j in range(t_slots):
        # slot j of (B, T, n_m, d), mean-pooled over the n_m rows
        x = T.mean_pool(_slot(slots, j), axis=-2)
        keep = Tensor(pad[:, j])          # 1 where padded
        fresh = Tensor(1.0 - pad[:, j])
        if kind == "rnn":
            h_new = T.tanh(T.add(T.add(T.matmul(x, w_ih), T.matmul(h, w_hh)), bias))
        elif kind == "gru":
            gates = T.add(T.add(T.matmul(x, w_ih), T.matmul(h, w_hh)), bias)
            z = T.sigmoid(_gate(gates, 0, d))
            r = T.sigmoid(_gate(gates, d, 2 * d))
            # candidate uses the reset-gated recurrent term
            n_in = T.add(T.matmul(x, w_ih), bias)
            n = T.tanh(T.add(_gate(n_in, 2 * d, 3 * d),
                             T.mul(r, _gate(T.matmul(h, w_hh), 2 * d, 3 * d))))
            h_new = T.add(T.mul(T.sub(Tensor(np.ones_like(z.data)), z), h), T.mul(z, n))
        else:  # lstm
            gates = T.add(T.add(T.matmul(x, w_ih), T.matmul(h, w_hh)), bias)
            i = T.sigmoid(_gate(gates, 0, d))
            f = T.sigmoid(_gate(gates, d, 2 * d))
            g = T.tanh(_gate(gates, 2 * d, 3 * d))
            o = T.sigmoid(_gate(gates, 3 * d, 4 * d))
            c_new = T.add(T.mul(f, c), T.mul(i, g))
            c = T.add(T.mul(keep, c), T.mul(fresh, c_new))
            h_new = T.mul(o, T.tanh(c))
        h = T.add(T.mul(keep, h), T.mul(fresh, h_new))
    out = h
    for _ in range(cfg.n_m - 1):
        out = T.concat_last_axis(out, h)
    return out


def _slot(slots: Tensor, j: int) -> Tensor:
    # (B, T, n_m, d) -> (B, n_m, d) at slot j, kept differentiable
    b, t, n_m, d = slots.shape
    flat = T.reshape(slots, (b, t * n_m, d))
    return T.slice_rows(flat, j * n_m, (j + 1) * n_m)


# ---------------------------------------------------------------------------
# per-episode inference runtime
# ---------------------------------------------------------------------------


class PolicyRuntime:
    """Holds per-episode state (memory buffer or raw-frame ring) and produces
    one action chunk per call, executing the mode's forward path."""

    def __init__(self, bundle: PolicyBundle, capture_attention=False):
        self.bundle = bundle
        self.capture = capture_attention
        self.reset_episode()

    def reset_episode(self):
        cfg = self.bundle.config
        self.buffer = MemoryBuffer(cfg.history, cfg.k) if self.bundle.uses_history else None
        self.frame_ring: list[np.ndarray] = []
        self.last_aux = {}

    def predict(self, obs, instruction, proprio, t: int) -> np.ndarray:
        bundle, cfg, reg = self.bundle, self.bundle.config, self.bundle.registry
        bb = cfg.backbone
        aux = {}
        if bundle.mode == "single_frame":
            seq = tokenize(obs, instruction, bb)
            h, _, _ = infer.encode_fast([seq], reg, bb)
            logits = infer.expert_fast(h, None, proprio[None], reg, cfg.k)
        elif bundle.mode == "multi_frame":
            self.frame_ring.append(np.asarray(obs))
            ring = self.frame_ring[-cfg.history:]
            stack = [ring[0]] * (cfg.history - len(ring)) + ring
            seq = tokenize(obs, instruction, bb, frame_stack=stack[:-1])
            h, _, _ = infer.encode_fast([seq], reg, bb)
            logits = infer.expert_fast(h, None, proprio[None], reg, cfg.k)
        else:
            seq = tokenize(obs, instruction, bb, with_moment=True, n_moment=cfg.n_m)
            h, m_prime, moment_attn = infer.encode_fast(
                [seq], reg, bb, moments=reg["moment.tokens"].data,
                capture_attention=self.capture)
            self.buffer.push(m_prime[0], t)
            slots, pad = stack_history(self.buffer)
            n_real = len(self.buffer)
            slots_b = slots[None]
            if bundle.mode == "hamlet":
                hist_mat = infer.assemble_history_fast(slots_b, n_real, reg, cfg.memory)
                hist, attn = infer.consolidate_fast(hist_mat, n_real, reg, cfg.memory,
                                                    capture_attention=self.capture)
                aux["memory_attention"] = attn
            elif bundle.mode == "moment_concat":
                hist = slots_b.reshape(1, -1)
            else:
                hist = infer.recurrent_history_fast(slots_b, n_real, reg,
                                                    bundle.mode, cfg.memory)
            aux["moment_attention"] = moment_attn
            aux["pad_slots"] = pad[None]
            aux["prefix_length"] = seq.prefix_length
            logits = infer.expert_fast(h, hist, proprio[None], reg, cfg.k)
        self.last_aux = aux
        return decode_actions(logits)[0]


# ---------------------------------------------------------------------------
# teacher-forced scoring on demonstration data
# ---------------------------------------------------------------------------


def precompute_moment_cache(bundle: PolicyBundle, trajectories: list[Trajectory],
                            batch: int = 64):
    """Frozen-backbone readout and moment outputs at every chunk-aligned
    timestep of every trajectory.  Returns per-trajectory (h, m') arrays."""
    cfg = bundle.config
    bb = cfg.backbone
    reg = bundle.registry
    moments = reg["moment.tokens"].data if "moment.tokens" in reg else None
    samples = [(ti, t) for ti, tr in enumerate(trajectories)
               for t in range(0, len(tr), cfg.k)]
    out_h = [np.zeros((0,))] * len(trajectories)
    out_m = [None] * len(trajectories)
    counts = [len(range(0, len(tr), cfg.k)) for tr in trajectories]
    for ti, tr in enumerate(trajectories):
        out_h[ti] = np.zeros((counts[ti], bb.d_model), dtype=np.float32)
        if moments is not None:
            out_m[ti] = np.zeros((counts[ti], cfg.n_m, bb.d_model), dtype=np.float32)
    for lo in range(0, len(samples), batch):
        group = samples[lo:lo + batch]
        seqs = [tokenize(trajectories[ti].observations[t], trajectories[ti].instruction,
                         bb, with_moment=moments is not None, n_moment=cfg.n_m)
                for ti, t in group]
        h, m_prime, _ = infer.encode_fast(seqs, reg, bb, moments=moments)
        for j, (ti, t) in enumerate(group):
            out_h[ti][t // cfg.k] = h[j]
            if moments is not None:
                out_m[ti][t // cfg.k] = m_prime[j]
    return out_h, out_m


def window_slots(m_cache: np.ndarray, j: int, history: int):
    """Teacher-forced history window ending at aligned index j: (T, n_m, d)
    slots (zeros at missing leading entries) plus the real-entry count."""
    n_m, d = m_cache.shape[1], m_cache.shape[2]
    slots = np.zeros((history, n_m, d), dtype=m_cache.dtype)
    n_real = min(j + 1, history)
    for s in range(n_real):
        slots[history - 1 - s] = m_cache[j - s]
    return slots, n_real


def history_feature_fast(bundle: PolicyBundle, slots_b, n_real: int):
    reg, mem = bundle.registry, bundle.config.memory
    if bundle.mode == "hamlet":
        hist_mat = infer.assemble_history_fast(slots_b, n_real, reg, mem)
        feat, _ = infer.consolidate_fast(hist_mat, n_real, reg, mem)
        return feat
    if bundle.mode == "moment_concat":
        return slots_b.reshape(slots_b.shape[0], -1)
    return infer.recurrent_history_fast(slots_b, n_real, reg, bundle.mode, mem)


def chunk_accuracy(bundle: PolicyBundle, trajectories: list[Trajectory],
                   batch: int = 128) -> float:
    """Exact-match accuracy of predicted k-chunks against expert chunks at
    chunk-aligned timesteps, with teacher-forced history."""
    cfg = bundle.config
    bb = cfg.backbone
    reg = bundle.registry
    k = cfg.k
    hits = total = 0
    if bundle.uses_history:
        h_cache, m_cache = precompute_moment_cache(bundle, trajectories)
        jobs = [(ti, j) for ti, tr in enumerate(trajectories)
                for j in range(len(range(0, len(tr), k)))]
        for lo in range(0, len(jobs), batch):
            group = jobs[lo:lo + batch]
            h = np.stack([h_cache[ti][j] for ti, j in group])
            slots, n_reals = [], []
            for ti, j in group:
                s, n_real = window_slots(m_cache[ti], j, cfg.history)
                slots.append(s)
                n_reals.append(n_real)
            prop = np.stack([trajectories[ti].proprios[j * k] for ti, j in group])
            # group rows by pad count so each sub-batch shares a mask
            logits = np.zeros((len(group), k, world.N_ACTIONS), dtype=np.float32)
            n_reals = np.asarray(n_reals)
            for nr in np.unique(n_reals):
                sel = np.nonzero(n_reals == nr)[0]
                feat = history_feature_fast(bundle, np.stack([slots[i] for i in sel]),
                                            int(nr))
                logits[sel] = infer.expert_fast(h[sel], feat, prop[sel], reg, k)
            for row, (ti, j) in enumerate(group):
                pred = decode_actions(logits[row])
                if np.array_equal(pred, chunk_at(trajectories[ti], j * k, k)):
                    hits += 1
                total += 1
    else:
        jobs = [(ti, t) for ti, tr in enumerate(trajectories)
                for t in range(0, len(tr), k)]
        for lo in range(0, len(jobs), batch):
            group = jobs[lo:lo + batch]
            seqs = []
            for ti, t in group:
                tr = trajectories[ti]
                if bundle.mode == "multi_frame":
                    aligned = [tr.observations[max(t - k * s, 0)]
                               for s in range(cfg.history - 1, 0, -1)]
                    seqs.append(tokenize(tr.observations[t], tr.instruction, bb,
                                         frame_stack=aligned))
                else:
                    seqs.append(tokenize(tr.observations[t], tr.instruction, bb))
            h, _, _ = infer.encode_fast(seqs, reg, bb)
            prop = np.stack([trajectories[ti].proprios[t] for ti, t in group])
            logits = infer.expert_fast(h, None, prop, reg, cfg.k)
            for row, (ti, t) in enumerate(group):
                pred = decode_actions(logits[row])
                if np.array_equal(pred, chunk_at(trajectories[ti], t, k)):
                    hits += 1
                total += 1
    return hits / total if total else 0.0


def run_episode(bundle: PolicyBundle, task_id: str, variant_seed: int,
                runtime: PolicyRuntime | None = None, timer=None,
                on_chunk=None):
    """Roll the policy, executing every decoded action of each chunk before
    re-observing.  Episodes that reach the horizon count as failures."""
    from time import perf_counter
    from .env import tasks

    rt = runtime or PolicyRuntime(bundle)
    rt.reset_episode()
    state, obs, proprio, instruction = tasks.reset(task_id, variant_seed)
    done = False
    full = partial = False
    steps = 0
    while not done:
        t0 = perf_counter()
        actions = rt.predict(obs, instruction, proprio, state.t)
        if timer is not None:
            timer.append(perf_counter() - t0)
        if on_chunk is not None:
            on_chunk(state.t, obs, rt.last_aux)
        for a in actions:
            state, obs, proprio, done, full, partial = world.step(state, int(a))
            steps += 1
            if done:
                break
    return {"full_success": bool(full), "partial_success": bool(partial),
            "length": steps}
