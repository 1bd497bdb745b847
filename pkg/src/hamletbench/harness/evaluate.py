"""Seeded policy evaluation: rollout success rates plus teacher-forced chunk
accuracy against the single-frame ceiling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..env import episode_seed, single_frame_ceiling
from ..env.demos import Trajectory
from ..policy import PolicyBundle, PolicyRuntime, chunk_accuracy, run_episode


@dataclass
class EvalReport:
    task: str
    variant: str
    n_episodes: int
    full_success: float
    partial_success: float
    full_se: float
    partial_se: float
    mean_length: float
    chunk_acc: float | None = None
    ceiling: float | None = None
    seed: int = 0
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _binomial_se(p: float, n: int) -> float:
    return math.sqrt(p * (1.0 - p) / n) if n else 0.0


def evaluate_policy(bundle: PolicyBundle, task_id: str, n_episodes: int, seed: int,
                    heldout: list[Trajectory] | None = None,
                    variant: str | None = None) -> EvalReport:
    """Rolls ``n_episodes`` seeded episodes (seeds shared across variants for
    paired comparisons); horizon timeouts count as failures."""
    runtime = PolicyRuntime(bundle)
    full = partial = 0
    lengths = []
    for i in range(n_episodes):
        res = run_episode(bundle, task_id, episode_seed(seed, i), runtime=runtime)
        full += res["full_success"]
        partial += res["partial_success"]
        lengths.append(res["length"])
    p_full = full / n_episodes
    p_part = partial / n_episodes
    report = EvalReport(
        task=task_id, variant=variant or bundle.mode, n_episodes=n_episodes,
        full_success=p_full, partial_success=p_part,
        full_se=_binomial_se(p_full, n_episodes),
        partial_se=_binomial_se(p_part, n_episodes),
        mean_length=float(np.mean(lengths)), seed=seed)
    if heldout:
        report.chunk_acc = chunk_accuracy(bundle, heldout)
        report.ceiling = single_frame_ceiling(heldout, bundle.config.k).ceiling
    return report
