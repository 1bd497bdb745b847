"""Demonstration generation and the JSON-lines demo file format.

One trajectory per line:
  {"task", "seed", "instruction": [int], "steps": [{"obs": [int; 49],
   "proprio": [float; 3], "action": int}], "full_success", "partial_success"}
plus a `<name>.manifest.json` sidecar.  Regeneration with the same seed is
byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tasks, world
from .expert import scripted_expert_action

FORMAT_VERSION = 1


@dataclass
class Trajectory:
    task: str
    seed: int
    instruction: np.ndarray
    observations: np.ndarray   # (T, 49) int
    proprios: np.ndarray       # (T, 3) float
    actions: np.ndarray        # (T,) int
    full_success: bool
    partial_success: bool

    def __len__(self):
        return len(self.actions)


def rollout_expert(task_id: str, variant_seed: int) -> Trajectory:
    state, obs, proprio, instruction = tasks.reset(task_id, variant_seed)
    observations, proprios, actions = [], [], []
    done = False
    full = partial = False
    while not done:
        a = scripted_expert_action(state)
        observations.append(obs)
        proprios.append(proprio)
        actions.append(a)
        state, obs, proprio, done, full, partial = world.step(state, a)
    return Trajectory(task=task_id, seed=variant_seed, instruction=instruction,
                      observations=np.array(observations, dtype=np.int64),
                      proprios=np.array(proprios, dtype=np.float64),
                      actions=np.array(actions, dtype=np.int64),
                      full_success=full, partial_success=partial)


def episode_seed(base_seed: int, index: int) -> int:
    return base_seed * 1_000_000 + index


def generate_demonstrations(task_id: str, n_episodes: int, seed: int, out_path):
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    trajectories = [rollout_expert(task_id, episode_seed(seed, i))
                    for i in range(n_episodes)]
    write_demo_file(out_path, trajectories, task_id=task_id, seed=seed)
    return trajectories


def write_demo_file(path, trajectories, task_id: str, seed: int):
    path = str(path)
    with open(path, "w", encoding="utf-8") as f:
        for tr in trajectories:
            row = {
                "task": tr.task,
                "seed": tr.seed,
                "instruction": tr.instruction.tolist(),
                "steps": [
                    {"obs": tr.observations[i].tolist(),
                     "proprio": tr.proprios[i].tolist(),
                     "action": int(tr.actions[i])}
                    for i in range(len(tr))
                ],
                "full_success": tr.full_success,
                "partial_success": tr.partial_success,
            }
            f.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
            f.write("\n")
    lengths = [len(tr) for tr in trajectories]
    manifest = {
        "format_version": FORMAT_VERSION,
        "task": task_id,
        "count": len(trajectories),
        "seed": seed,
        "horizon": world.HORIZON,
        "mean_length": sum(lengths) / len(lengths),
        "max_length": max(lengths),
        "obs_vocab": world.OBS_TOKEN_NAMES,
        "action_names": world.ACTION_NAMES,
    }
    with open(path + ".manifest.json" if not path.endswith(".jsonl")
              else path[:-6] + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def manifest_path(demo_path) -> str:
    p = str(demo_path)
    return p[:-6] + ".manifest.json" if p.endswith(".jsonl") else p + ".manifest.json"


def load_demo_file(path) -> list[Trajectory]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            steps = row["steps"]
            out.append(Trajectory(
                task=row["task"], seed=row["seed"],
                instruction=np.array(row["instruction"], dtype=np.int64),
                observations=np.array([s["obs"] for s in steps], dtype=np.int64),
                proprios=np.array([s["proprio"] for s in steps], dtype=np.float64),
                actions=np.array([s["action"] for s in steps], dtype=np.int64),
                full_success=row["full_success"],
                partial_success=row["partial_success"],
            ))
    return out


def chunk_at(tr: Trajectory, t: int, k: int) -> np.ndarray:
    """Expert action chunk starting at t, right-padded with the final action."""
    chunk = tr.actions[t:t + k]
    if len(chunk) < k:
        chunk = np.concatenate([chunk, np.full(k - len(chunk), tr.actions[-1])])
    return chunk.astype(np.int64)


def chunk_aligned_indices(tr: Trajectory, k: int):
    return range(0, len(tr), k)
