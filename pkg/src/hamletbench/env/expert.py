"""Scripted expert: shortest paths through the task's fixed subgoal plan."""

from __future__ import annotations

from .world import DOWN, GRASP, LEFT, RELEASE, RIGHT, UP, GridState

_ORDER = (UP, DOWN, LEFT, RIGHT)
_DELTAS = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}


class EpisodeComplete(RuntimeError):
    pass


def scripted_expert_action(state: GridState) -> int:
    """Deterministic next expert action for the current hidden subgoal.

    Movement is breadth-first shortest path; the grid has no obstacles for the
    gripper, so the first action in UP<DOWN<LEFT<RIGHT order that strictly
    reduces distance to the subgoal cell is taken.
    """
    if state.full_done:
        raise EpisodeComplete("expert queried on a completed episode")
    goal = state.subgoals[min(state.subgoal_idx, len(state.subgoals) - 1)]
    gx, gy = state.gripper
    tx, ty = goal.cell
    if (gx, gy) == (tx, ty):
        if goal.op is None:
            raise EpisodeComplete("waypoint subgoal not consumed; plan exhausted")
        return goal.op
    dist = abs(tx - gx) + abs(ty - gy)
    for action in _ORDER:
        dx, dy = _DELTAS[action]
        nx = min(max(gx + dx, 0), 6)
        ny = min(max(gy + dy, 0), 6)
        if abs(tx - nx) + abs(ty - ny) < dist:
            return action
    raise AssertionError("no distance-reducing move found")
