"""Moment tokens: symbolic-view augmentations, the time-contrastive objective
and the stage that trains the tokens against a frozen backbone."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, encode, tokenize
from .env import world
from .env.demos import Trajectory
from .optim import ParamRegistry, adam_step
from .tensor import Tape, Tensor, backward

P_OCCLUDE = 0.5
P_NOISE = 0.5
P_JITTER = 0.5
NOISE_CELL_PROB = 0.05
JITTER_SIGMA_COEF = 0.02


@dataclass
class AugmentedView:
    obs: np.ndarray
    jitter: bool
    jitter_seed: int


def augment_observation(obs, rng: np.random.Generator) -> AugmentedView:
    """Occlusion rectangle, token noise and an embed-time jitter flag, each
    applied with probability 0.5; the identity draw is resampled so a view
    always differs from its source in at least one cell or the jitter flag."""
    obs = np.asarray(obs, dtype=np.int64).reshape(-1)
    grid = obs.reshape(world.HEIGHT, world.WIDTH)
    while True:
        out = grid.copy()
        if rng.random() < P_OCCLUDE:
            h = int(rng.integers(1, 4))
            w = int(rng.integers(1, 4))
            y0 = int(rng.integers(0, world.HEIGHT - h + 1))
            x0 = int(rng.integers(0, world.WIDTH - w + 1))
            out[y0:y0 + h, x0:x0 + w] = world.MASK
        if rng.random() < P_NOISE:
            hit = rng.random(out.shape) < NOISE_CELL_PROB
            out[hit] = rng.integers(0, world.OBS_VOCAB_SIZE, size=int(hit.sum()))
        jitter = rng.random() < P_JITTER
        seed = int(rng.integers(0, 2**31 - 1)) if jitter else 0
        if jitter or (out != grid).any():
            return AugmentedView(obs=out.reshape(-1), jitter=jitter, jitter_seed=seed)


def jitter_sigma(d_model: int) -> float:
    return JITTER_SIGMA_COEF * float(np.sqrt(d_model))


# ---------------------------------------------------------------------------
# moment tokens and projection head
# ---------------------------------------------------------------------------


def init_moment_tokens(reg: ParamRegistry, rng, n_m: int, d_model: int):
    reg.add("moment.tokens", T.uniform_init(rng, (n_m, d_model), d_model))


def init_projection_head(reg: ParamRegistry, rng, d_model: int, d_proj: int):
    reg.add("proj.w1", T.uniform_init(rng, (d_model, d_model), d_model))
    reg.add("proj.b1", T.zeros(d_model))
    reg.add("proj.w2", T.uniform_init(rng, (d_model, d_proj), d_model))
    reg.add("proj.b2", T.zeros(d_proj))


def project(m_prime: Tensor, reg: ParamRegistry) -> Tensor:
    """z = g(mean-pooled m'); two-layer head used only during TCL."""
    pooled = T.mean_pool(m_prime, axis=-2)
    z = T.relu(T.add(T.matmul(pooled, reg["proj.w1"]), reg["proj.b1"]))
    return T.add(T.matmul(z, reg["proj.w2"]), reg["proj.b2"])


def tcl_loss(z: Tensor, z_pos: Tensor, z_neg: Tensor, tau: float) -> Tensor:
    """Two-term InfoNCE over cosine similarities, mean over the batch.

    Equals softplus((sim- - sim+)/tau) per anchor, so the symmetric point is
    exactly ln 2 and a saturated margin drives the loss to 0.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    s_pos = T.cosine_similarity(z, z_pos)
    s_neg = T.cosine_similarity(z, z_neg)
    return T.mean_all(T.softplus(T.scale(T.sub(s_neg, s_pos), 1.0 / tau)))


@dataclass
class TCLBatchSpec:
    batch: int = 16
    tau: float = 0.1
    min_negative_offset: int = 4   # |t' - t| >= chunk length


@dataclass
class TCLResult:
    losses: list
    steps: int


def _sample_anchor(rng, trajectories, min_off):
    while True:
        tr = trajectories[int(rng.integers(len(trajectories)))]
        if len(tr) > min_off:
            break
    t = int(rng.integers(len(tr)))
    valid = [u for u in range(len(tr)) if abs(u - t) >= min_off]
    t_neg = valid[int(rng.integers(len(valid)))]
    return tr, t, t_neg


def encode_moments(obs_batch, instr, reg, cfg: BackboneConfig, n_m,
                   jitter=None) -> Tensor:
    """m' for a batch of single observations (jitter: list of AugmentedView)."""
    sigma = jitter_sigma(cfg.d_model)
    seqs = []
    for i, obs in enumerate(obs_batch):
        view = jitter[i] if jitter is not None else None
        seqs.append(tokenize(
            obs, instr, cfg, with_moment=True, n_moment=n_m,
            jitter_sigma=sigma if (view is not None and view.jitter) else 0.0,
            jitter_seed=view.jitter_seed if view is not None else 0))
    return encode(seqs, reg, cfg, moments=reg["moment.tokens"]).m_prime


def train_moment_tokens(reg: ParamRegistry, cfg: BackboneConfig, n_m: int,
                        trajectories: list[Trajectory], spec: TCLBatchSpec,
                        steps: int, lr: float, seed: int) -> TCLResult:
    """Optimize moment tokens + projection head with the backbone frozen.

    Anchors come from clean frames, positives from augmented views of the same
    frame, hard negatives from a different timestep of the same trajectory.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    frozen_before = {n: reg[n].data.copy() for n in reg.names()
                     if n.startswith("backbone.")}
    losses = []
    for _ in range(steps):
        anchors = [_sample_anchor(rng, trajectories, spec.min_negative_offset)
                   for _ in range(spec.batch)]
        clean = [tr.observations[t] for tr, t, _ in anchors]
        views = [augment_observation(tr.observations[t], rng) for tr, t, _ in anchors]
        neg = [tr.observations[tn] for tr, _, tn in anchors]
        instr = anchors[0][0].instruction
        reg.zero_grad()
        with Tape() as tape:
            z = project(encode_moments(clean, instr, reg, cfg, n_m), reg)
            z_pos = project(encode_moments([v.obs for v in views], instr, reg, cfg,
                                           n_m, jitter=views), reg)
            z_neg = project(encode_moments(neg, instr, reg, cfg, n_m), reg)
            loss = tcl_loss(z, z_pos, z_neg, spec.tau)
        if not np.isfinite(loss.item()):
            raise RuntimeError(f"TCL loss diverged at step {len(losses)}: {loss.item()}")
        backward(loss, tape)
        adam_step(reg, lr)
        losses.append(loss.item())
    for n, before in frozen_before.items():
        if not np.array_equal(before, reg[n].data):
            raise RuntimeError(f"freeze contract violated: backbone parameter {n} drifted")
    return TCLResult(losses=losses, steps=steps)


def similarity_margin(reg: ParamRegistry, cfg: BackboneConfig, n_m: int,
                      trajectories, n_anchors: int, seed: int,
                      min_off: int = 4) -> float:
    """mean sim(z, z+) - mean sim(z, z-) on fresh anchors; diagnostic only."""
    rng = np.random.Generator(np.random.PCG64(seed))
    pos_sims, neg_sims = [], []
    for _ in range(n_anchors):
        tr, t, tn = _sample_anchor(rng, trajectories, min_off)
        view = augment_observation(tr.observations[t], rng)
        z = project(encode_moments([tr.observations[t]], tr.instruction, reg, cfg, n_m), reg)
        zp = project(encode_moments([view.obs], tr.instruction, reg, cfg, n_m,
                                    jitter=[view]), reg)
        zn = project(encode_moments([tr.observations[tn]], tr.instruction, reg, cfg, n_m), reg)
        pos_sims.append(T.cosine_similarity(z, zp).item())
        neg_sims.append(T.cosine_similarity(z, zn).item())
    return float(np.mean(pos_sims) - np.mean(neg_sims))
