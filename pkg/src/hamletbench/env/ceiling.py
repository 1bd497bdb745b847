"""Brute-force upper bound on what any memoryless policy can score.

Chunk-aligned timesteps are grouped by their exact single-frame key
(observation tokens, instruction, proprio quantized to the grid cell).  The
best a policy without history can do on a group is answer with its modal
expert chunk, so the dataset-level ceiling is the frequency-weighted sum of
modal-chunk frequencies.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass

from .world import HEIGHT, WIDTH
from .demos import Trajectory, chunk_at, chunk_aligned_indices


def frame_key(obs, instruction, proprio):
    cell_x = int(round(proprio[0] * (WIDTH - 1)))
    cell_y = int(round(proprio[1] * (HEIGHT - 1)))
    holding = int(round(proprio[2]))
    return (tuple(int(v) for v in obs), tuple(int(v) for v in instruction),
            (cell_x, cell_y, holding))


@dataclass
class AmbiguityGroup:
    key: tuple
    total: int
    chunk_counts: dict


@dataclass
class CeilingReport:
    ceiling: float
    total_samples: int
    n_groups: int
    ambiguous_groups: list  # groups with >1 distinct expert chunk

    @property
    def ambiguous_sample_fraction(self) -> float:
        amb = sum(g.total for g in self.ambiguous_groups)
        return amb / self.total_samples if self.total_samples else 0.0


def single_frame_ceiling(trajectories: list[Trajectory], k: int) -> CeilingReport:
    if not trajectories:
        raise ValueError("empty demo set")
    groups = defaultdict(Counter)
    total = 0
    for tr in trajectories:
        for t in chunk_aligned_indices(tr, k):
            key = frame_key(tr.observations[t], tr.instruction, tr.proprios[t])
            groups[key][tuple(chunk_at(tr, t, k).tolist())] += 1
            total += 1
    best = sum(max(c.values()) for c in groups.values())
    ambiguous = [AmbiguityGroup(key=key, total=sum(c.values()), chunk_counts=dict(c))
                 for key, c in groups.items() if len(c) > 1]
    ambiguous.sort(key=lambda g: -g.total)
    return CeilingReport(ceiling=best / total, total_samples=total,
                         n_groups=len(groups), ambiguous_groups=ambiguous)
