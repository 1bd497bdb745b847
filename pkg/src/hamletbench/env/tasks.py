"""Task layouts, instructions, scripted-expert subgoal plans and success rules.

Each task is built so that some single-frame observations are consistent with
several distinct hidden phases that demand different expert actions:

* pick_place_twice - the cube shuttles start->target->start->target, so every
  mid-carry frame looks identical regardless of transfer direction.  The
  expert retracts to its home cell after the first two placements (mirroring
  an arm pulling back), which also keeps the cube visible for several frames
  between transfers.
* cover_and_stack - once a cup covers the cube, a cup-on-cube renders exactly
  like a cup on bare floor, so the frame cannot say which cup to fetch next.
* swap_cubes - which cube was staged to the auxiliary site first is a hidden
  per-episode plan bit; while carrying the second cube both remaining sites
  are bare and the correct destination is invisible.
"""

from __future__ import annotations

import numpy as np

from .world import (
    CUBE_B, CUBE_G, CUBE_R, CUP_P, CUP_Y, GRASP, RELEASE,
    INSTR_COVER, INSTR_PPT, INSTR_SWAP, INSTR_TGT_LEFT, INSTR_TGT_RIGHT,
    SITE_AUX, SITE_L, SITE_R,
    Entity, GridState, Subgoal, proprio_state, render_observation,
)

TASK_IDS = ("pick_place_twice", "cover_and_stack", "swap_cubes")

_HOME_CELLS = [(x, y) for y in (2, 3, 4) for x in (2, 3, 4)]
_COVER_ZONE = [(1, 1), (5, 1), (1, 5), (5, 5)]


def reset(task_id: str, variant_seed: int):
    """Deterministic initial state for the given variant.

    Returns (state, observation, proprio, instruction).
    """
    if task_id not in TASK_IDS:
        raise ValueError(f"unknown task_id {task_id!r}; expected one of {TASK_IDS}")
    rng = np.random.Generator(np.random.PCG64(variant_seed))
    builder = {"pick_place_twice": _build_ppt,
               "cover_and_stack": _build_cover,
               "swap_cubes": _build_swap}[task_id]
    state, instruction = builder(task_id, variant_seed, rng)
    return state, render_observation(state), proprio_state(state), instruction


def _base_state(task_id, seed, home):
    return GridState(task_id=task_id, seed=seed, entities={}, stacks={},
                     gripper=home, holding=None, home=home, subgoals=[])


def _add_entity(state, kind, token, cell=None):
    eid = len(state.entities) + 1
    state.entities[eid] = Entity(eid, kind, token)
    if cell is not None:
        state.stacks.setdefault(cell, []).append(eid)
    return eid


def _build_ppt(task_id, seed, rng):
    y = int(rng.choice([1, 3, 5]))
    start_left = bool(rng.integers(2))
    cube_token = int(rng.choice([CUBE_R, CUBE_B, CUBE_G]))
    home = _HOME_CELLS[int(rng.integers(len(_HOME_CELLS)))]

    l_cell, r_cell = (0, y), (6, y)
    s = _base_state(task_id, seed, home)
    _add_entity(s, "site", SITE_L, l_cell)
    _add_entity(s, "site", SITE_R, r_cell)
    start = l_cell if start_left else r_cell
    target = r_cell if start_left else l_cell
    cube = _add_entity(s, "cube", cube_token, start)

    s.info = {"start_cell": start, "target_cell": target, "cube_eid": cube,
              "site_visits": []}
    s.subgoals = [
        Subgoal(start, GRASP), Subgoal(target, RELEASE), Subgoal(home),
        Subgoal(target, GRASP), Subgoal(start, RELEASE), Subgoal(home),
        Subgoal(start, GRASP), Subgoal(target, RELEASE),
    ]
    instr = np.array([INSTR_PPT, INSTR_TGT_RIGHT if start_left else INSTR_TGT_LEFT],
                     dtype=np.int64)
    return s, instr


def _build_cover(task_id, seed, rng):
    cells = [
        _COVER_ZONE[i] for i in rng.choice(len(_COVER_ZONE), size=3, replace=False)
    ]
    cube_cell, y_cell, p_cell = cells
    cube_token = int(rng.choice([CUBE_R, CUBE_B, CUBE_G]))
    home = _HOME_CELLS[int(rng.integers(len(_HOME_CELLS)))]

    s = _base_state(task_id, seed, home)
    cube = _add_entity(s, "cube", cube_token, cube_cell)
    cup_y = _add_entity(s, "cup", CUP_Y, y_cell)
    cup_p = _add_entity(s, "cup", CUP_P, p_cell)

    def dist(a, b):
        return abs(a[0] - b[0]) + abs(a[1] - b[1])

    # nearest cup covers first; ties broken by cell order so the plan is unique
    ranked = sorted([(dist(y_cell, cube_cell), y_cell[1], y_cell[0], cup_y, y_cell),
                     (dist(p_cell, cube_cell), p_cell[1], p_cell[0], cup_p, p_cell)])
    near_eid, near_cell = ranked[0][3], ranked[0][4]
    far_eid, far_cell = ranked[1][3], ranked[1][4]

    s.info = {"cube_eid": cube, "near_eid": near_eid, "far_eid": far_eid}
    s.subgoals = [
        Subgoal(near_cell, GRASP), Subgoal(cube_cell, RELEASE),
        Subgoal(far_cell, GRASP), Subgoal(cube_cell, RELEASE),
    ]
    instr = np.array([INSTR_COVER], dtype=np.int64)
    return s, instr


def _build_swap(task_id, seed, rng):
    l_cell, r_cell = (1, 3), (5, 3)
    aux_cell = (3, 1) if rng.integers(2) else (3, 5)
    blue_on_left = bool(rng.integers(2))
    stage_left_first = bool(rng.integers(2))
    home = _HOME_CELLS[int(rng.integers(len(_HOME_CELLS)))]

    s = _base_state(task_id, seed, home)
    _add_entity(s, "site", SITE_L, l_cell)
    _add_entity(s, "site", SITE_R, r_cell)
    _add_entity(s, "site", SITE_AUX, aux_cell)
    l_cube = _add_entity(s, "cube", CUBE_B if blue_on_left else CUBE_G, l_cell)
    r_cube = _add_entity(s, "cube", CUBE_G if blue_on_left else CUBE_B, r_cell)

    s.info = {"l_cell": l_cell, "r_cell": r_cell, "aux_cell": aux_cell,
              "l_eid": l_cube, "r_eid": r_cube}
    # the staging order is a hidden plan choice: either order swaps the cubes,
    # and the instruction does not reveal it
    first, second = (l_cell, r_cell) if stage_left_first else (r_cell, l_cell)
    s.subgoals = [
        Subgoal(first, GRASP), Subgoal(aux_cell, RELEASE),
        Subgoal(second, GRASP), Subgoal(first, RELEASE),
        Subgoal(aux_cell, GRASP), Subgoal(second, RELEASE),
    ]
    instr = np.array([INSTR_SWAP], dtype=np.int64)
    return s, instr


# ---------------------------------------------------------------------------
# success detection (simulator-side, latched)
# ---------------------------------------------------------------------------


def _entity_cell(state, eid):
    for cell, stack in state.stacks.items():
        if eid in stack:
            return cell
    return None


def update_success(s: GridState):
    if s.task_id == "pick_place_twice":
        _ppt_success(s)
    elif s.task_id == "cover_and_stack":
        _cover_success(s)
    elif s.task_id == "swap_cubes":
        _swap_success(s)


def _ppt_success(s):
    place = s.info.get("last_place")
    if place is not None and place[2] == s.t and place[0] == s.info["cube_eid"]:
        if place[1] == s.info["target_cell"]:
            s.info["site_visits"].append("target")
        elif place[1] == s.info["start_cell"]:
            s.info["site_visits"].append("start")
    visits = s.info["site_visits"]
    if "target" in visits:
        s.partial_done = True
    # full = target, then start, then target again (the cube shuttled twice)
    stage = 0
    for v in visits:
        if stage in (0, 2) and v == "target":
            stage += 1
        elif stage == 1 and v == "start":
            stage += 1
    if stage >= 3:
        s.full_done = True


def _cover_success(s):
    cube_cell = _entity_cell(s, s.info["cube_eid"])
    if cube_cell is None:
        return
    stack = s.stacks[cube_cell]
    i = stack.index(s.info["cube_eid"])
    above = stack[i + 1:]
    if above[:1] == [s.info["near_eid"]]:
        s.partial_done = True
        if above == [s.info["near_eid"], s.info["far_eid"]]:
            s.full_done = True


def _swap_success(s):
    aux_top = s.top(s.info["aux_cell"])
    if aux_top is not None and aux_top.kind == "cube":
        s.partial_done = True
    if (_entity_cell(s, s.info["l_eid"]) == s.info["r_cell"]
            and _entity_cell(s, s.info["r_eid"]) == s.info["l_cell"]
            and s.holding is None):
        s.full_done = True
