"""Attention-map export for history-aware policies.

Per rollout step: (a) last-layer backbone attention from each moment token to
the observation cells, head-averaged, as a 7x7 map; (b) memory-module
attention from the current query block to past timestep slots, per layer.
Cell-entropy statistics are included so token-initialization variants can be
compared quantitatively.
"""

from __future__ import annotations

import json

import numpy as np

from ..env import world
from ..memory import timestep_attention
from ..policy import PolicyBundle, PolicyRuntime, run_episode


def _moment_cell_maps(attn_last_layer: np.ndarray, instr_len: int, n_m: int):
    """(heads, n_m, S) moment-query attention -> n_m head-averaged 7x7 maps
    over the current frame's cell positions."""
    q = attn_last_layer[0, :, :, :]           # (heads, n_m, S) for batch row 0
    cells = q[:, :, instr_len:instr_len + world.WIDTH * world.HEIGHT]
    head_avg = cells.mean(axis=0)             # (n_m, 49)
    return head_avg.reshape(n_m, world.HEIGHT, world.WIDTH)


def _entropy(p: np.ndarray) -> float:
    q = p / max(p.sum(), 1e-12)
    nz = q[q > 1e-12]
    return float(-(nz * np.log(nz)).sum())


def export_attention(bundle: PolicyBundle, task_id: str, seed: int, out_path):
    """Rolls one seeded episode capturing attention; writes a JSON dump."""
    if not bundle.uses_history:
        raise ValueError("attention export requires a history-aware bundle")
    cfg = bundle.config
    runtime = PolicyRuntime(bundle, capture_attention=True)
    steps = []

    def on_chunk(t, obs, aux):
        moment_attn = aux.get("moment_attention") or []
        entry = {"t": int(t), "obs": [int(v) for v in obs]}
        if moment_attn:
            # continuation maps: (B, heads, n_m, prefix + n_m) per layer
            last = moment_attn[-1]
            maps = _moment_cell_maps(last, len(runtime._instr), cfg.n_m)
            entry["moment_cell_maps"] = maps.tolist()
            entry["moment_map_entropy"] = [_entropy(m.reshape(-1)) for m in maps]
        mem_attn = aux.get("memory_attention") or []
        if mem_attn:
            pad = aux["pad_slots"]
            vectors = {}
            for li, layer_map in enumerate(mem_attn):
                vec = timestep_attention(layer_map, cfg.memory)[0]
                vectors[str(li)] = vec.tolist()
            entry["memory_timestep_attention"] = vectors
            entry["pad_slots"] = [bool(v) for v in pad[0]]
        steps.append(entry)

    # stash the instruction for cell-map alignment
    from ..env import tasks
    _, _, _, instr = tasks.reset(task_id, seed)
    runtime._instr = instr

    result = run_episode(bundle, task_id, seed, runtime=runtime, on_chunk=on_chunk)
    dump = {
        "task": task_id,
        "seed": seed,
        "variant": bundle.mode,
        "n_m": cfg.n_m,
        "history": cfg.history,
        "full_success": result["full_success"],
        "mean_moment_entropy": float(np.mean([e for s in steps
                                              for e in s.get("moment_map_entropy", [])]))
        if steps else 0.0,
        "steps": steps,
    }
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(dump, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    return dump
