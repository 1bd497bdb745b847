"""Gridworld manipulation simulator with stacked cells and a flying gripper.

Observations render only the top of each cell's stack, so anything underneath
(a cube below a cup, a site marker below anything) is occluded.  The gripper
and the entity it holds are never rendered; the proprio channel exposes the
gripper position and a bare holding flag, not the held entity's identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WIDTH = 7
HEIGHT = 7
HORIZON = 120

# observation vocabulary
EMPTY, CUBE_R, CUBE_B, CUBE_G, CUP_Y, CUP_P, SITE_L, SITE_R, SITE_AUX, MASK = range(10)
OBS_VOCAB_SIZE = 10
OBS_TOKEN_NAMES = ["EMPTY", "CUBE_R", "CUBE_B", "CUBE_G", "CUP_Y", "CUP_P",
                   "SITE_L", "SITE_R", "SITE_AUX", "MASK"]

CUBE_TOKENS = (CUBE_R, CUBE_B, CUBE_G)
CUP_TOKENS = (CUP_Y, CUP_P)
SITE_TOKENS = (SITE_L, SITE_R, SITE_AUX)

# actions
UP, DOWN, LEFT, RIGHT, GRASP, RELEASE = range(6)
N_ACTIONS = 6
ACTION_NAMES = ["UP", "DOWN", "LEFT", "RIGHT", "GRASP", "RELEASE"]
_MOVES = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}

# instruction vocabulary
INSTR_PPT, INSTR_COVER, INSTR_SWAP, INSTR_TGT_LEFT, INSTR_TGT_RIGHT = range(5)
INSTR_VOCAB_SIZE = 5
MAX_INSTR_LEN = 8


@dataclass
class Entity:
    eid: int
    kind: str        # "cube" | "cup" | "site"
    token: int       # rendered class token


@dataclass
class Subgoal:
    cell: tuple[int, int]
    op: int | None = None  # GRASP / RELEASE at the cell, or None for a plain waypoint


@dataclass
class GridState:
    task_id: str
    seed: int
    entities: dict[int, Entity]
    stacks: dict[tuple[int, int], list[int]]   # cell -> entity ids, bottom to top
    gripper: tuple[int, int]
    holding: int | None
    home: tuple[int, int]
    subgoals: list[Subgoal]
    # hidden progress, never rendered
    subgoal_idx: int = 0
    t: int = 0
    partial_done: bool = False
    full_done: bool = False
    # task bookkeeping filled in by the task layout
    info: dict = field(default_factory=dict)

    def top(self, cell):
        s = self.stacks.get(cell)
        return self.entities[s[-1]] if s else None

    def clone(self):
        return GridState(
            task_id=self.task_id, seed=self.seed,
            entities={k: Entity(v.eid, v.kind, v.token) for k, v in self.entities.items()},
            stacks={c: list(s) for c, s in self.stacks.items()},
            gripper=self.gripper, holding=self.holding, home=self.home,
            subgoals=list(self.subgoals), subgoal_idx=self.subgoal_idx, t=self.t,
            partial_done=self.partial_done, full_done=self.full_done,
            info=dict(self.info),
        )


def render_observation(state: GridState) -> np.ndarray:
    """Top-of-stack token per cell, row-major (y * WIDTH + x)."""
    obs = np.zeros(WIDTH * HEIGHT, dtype=np.int64)
    for (x, y), stack in state.stacks.items():
        if stack:
            obs[y * WIDTH + x] = state.entities[stack[-1]].token
    return obs


def proprio_state(state: GridState) -> np.ndarray:
    x, y = state.gripper
    return np.array([x / (WIDTH - 1), y / (HEIGHT - 1),
                     1.0 if state.holding is not None else 0.0], dtype=np.float64)


def _can_place(state: GridState, entity: Entity, cell) -> bool:
    top = state.top(cell)
    if entity.kind == "cube":
        # cubes sit only on bare floor or a site marker
        return top is None or top.kind == "site"
    if entity.kind == "cup":
        # cups may cover cubes and stack on cups
        return top is None or top.kind in ("site", "cube", "cup")
    return False


def step(state: GridState, action: int):
    """Pure transition; illegal physical actions are no-ops.

    Returns (state', obs, proprio, done, full_success, partial_success).
    """
    s = state.clone()
    s.t += 1
    if action in _MOVES:
        dx, dy = _MOVES[action]
        x = min(max(s.gripper[0] + dx, 0), WIDTH - 1)
        y = min(max(s.gripper[1] + dy, 0), HEIGHT - 1)
        s.gripper = (x, y)
    elif action == GRASP:
        if s.holding is None:
            top = s.top(s.gripper)
            if top is not None and top.kind in ("cube", "cup"):
                s.stacks[s.gripper].pop()
                if not s.stacks[s.gripper]:
                    del s.stacks[s.gripper]
                s.holding = top.eid
    elif action == RELEASE:
        if s.holding is not None:
            ent = s.entities[s.holding]
            if _can_place(s, ent, s.gripper):
                s.stacks.setdefault(s.gripper, []).append(ent.eid)
                s.holding = None
                s.info["last_place"] = (ent.eid, s.gripper, s.t)
    else:
        raise ValueError(f"unknown action {action}")

    _advance_subgoal(s)
    from . import tasks  # late import; tasks depends on this module
    tasks.update_success(s)
    done = s.full_done or s.t >= HORIZON
    return s, render_observation(s), proprio_state(s), done, s.full_done, s.partial_done


def _advance_subgoal(s: GridState):
    # consume waypoints on arrival and op-subgoals once their op has happened
    while s.subgoal_idx < len(s.subgoals):
        g = s.subgoals[s.subgoal_idx]
        if g.op is None:
            if s.gripper == g.cell:
                s.subgoal_idx += 1
                continue
        else:
            achieved = (s.gripper == g.cell
                        and ((g.op == GRASP and s.holding is not None)
                             or (g.op == RELEASE and s.holding is None)))
            if achieved:
                s.subgoal_idx += 1
                continue
        break
